#include "stgp/kernels.hpp"

#include <algorithm>
#include <numbers>
#include <set>

namespace stgp {

namespace {

constexpr double kPi = std::numbers::pi;

// ---------------------------------------------------------------------------
// Leaf entries. Both the per-entry reference path and the matrix path call
// these on the same cached constants and per-row phases, which is what keeps
// them bit-identical.

/// Hyperparameters of one leaf in the form the inner loops use.
struct Leaf {
  bool se;
  bool ard;
  bool learn_period;
  double variance;
  std::vector<double> inv_ls;  // 1/l per lengthscale
  double inv_l2;               // 1/l^2 of the first lengthscale
  double period;
  double pi_over_p;

  explicit Leaf(const Kernel& k)
      : se(k.kind() == KernelKind::SquaredExponential),
        ard(k.ard()),
        learn_period(k.learn_period()),
        variance(k.variance()),
        inv_l2(std::exp(-2.0 * k.log_lengthscales()[0])),
        period(se ? 1.0 : k.period()),
        pi_over_p(kPi / period) {
    for (double l : k.log_lengthscales()) inv_ls.push_back(std::exp(-l));
  }
};

/// Inputs laid out one point per column. Periodic leaves also carry
/// sin(pi x / p) and cos(pi x / p), so sin(pi (a - b) / p) needs no
/// transcendental call per pair.
struct Rows {
  MatrixXd x, s, c;
};

Rows rows_of(const Leaf& k, const MatrixXd& X) {
  Rows r{X.transpose(), {}, {}};
  if (!k.se) {
    r.s = (r.x * k.pi_over_p).array().sin();
    r.c = (r.x * k.pi_over_p).array().cos();
  }
  return r;
}

struct Pt {
  const double* x;
  const double* s;
  const double* c;
};

Pt pt(const Rows& r, Index i) {
  return {r.x.col(i).data(), r.s.size() ? r.s.col(i).data() : nullptr, r.c.size() ? r.c.col(i).data() : nullptr};
}

double se_r2(const Leaf& k, const double* a, const double* b, Index d) {
  double r2 = 0.0;
  if (k.ard) {
    for (Index c = 0; c < d; ++c) {
      const double z = (a[c] - b[c]) * k.inv_ls[static_cast<std::size_t>(c)];
      r2 += z * z;
    }
    return r2;
  }
  for (Index c = 0; c < d; ++c) {
    const double z = a[c] - b[c];
    r2 += z * z;
  }
  return r2 * k.inv_l2;
}

// sin(pi (a_c - b_c) / p) for one coordinate.
inline double phase_sin(const Pt& a, const Pt& b, Index c) { return a.s[c] * b.c[c] - a.c[c] * b.s[c]; }
inline double phase_cos(const Pt& a, const Pt& b, Index c) { return a.c[c] * b.c[c] + a.s[c] * b.s[c]; }

double periodic_sum(const Pt& a, const Pt& b, Index d) {
  double s = 0.0;
  for (Index c = 0; c < d; ++c) {
    const double v = phase_sin(a, b, c);
    s += v * v;
  }
  return s;
}

double leaf_value(const Leaf& k, const Pt& a, const Pt& b, Index d) {
  if (k.se) return k.variance * std::exp(-0.5 * se_r2(k, a.x, b.x, d));
  return k.variance * std::exp(-2.0 * periodic_sum(a, b, d) * k.inv_l2);
}

// Writes d value / d log-param into `g` (leaf parameter order); returns value.
double leaf_value_grad(const Leaf& k, const Pt& a, const Pt& b, Index d, double* g) {
  if (k.se) {
    if (k.ard) {
      double r2 = 0.0;
      for (Index c = 0; c < d; ++c) {
        const double z = (a.x[c] - b.x[c]) * k.inv_ls[static_cast<std::size_t>(c)];
        g[1 + c] = z * z;
        r2 += z * z;
      }
      const double v = k.variance * std::exp(-0.5 * r2);
      g[0] = v;
      for (Index c = 0; c < d; ++c) g[1 + c] *= v;
      return v;
    }
    const double r2 = se_r2(k, a.x, b.x, d);
    const double v = k.variance * std::exp(-0.5 * r2);
    g[0] = v;
    g[1] = v * r2;
    return v;
  }
  const double s = periodic_sum(a, b, d);
  const double v = k.variance * std::exp(-2.0 * s * k.inv_l2);
  g[0] = v;
  g[1] = v * 4.0 * s * k.inv_l2;
  if (k.learn_period) {
    // delta * sin(2 pi delta / p), with sin(2t) = 2 sin t cos t
    double acc = 0.0;
    for (Index c = 0; c < d; ++c) acc += (a.x[c] - b.x[c]) * 2.0 * phase_sin(a, b, c) * phase_cos(a, b, c);
    g[2] = v * 2.0 * kPi * acc * k.inv_l2 / k.period;
  }
  return v;
}

// d value / d a (first argument), accumulated as w * grad into `out`.
void leaf_input_grad(const Leaf& k, const Pt& a, const Pt& b, Index d, double w, double* out) {
  const double v = leaf_value(k, a, b, d);
  if (k.se) {
    for (Index c = 0; c < d; ++c) {
      const double il = k.inv_ls[k.ard ? static_cast<std::size_t>(c) : 0];
      out[c] += w * v * (-(a.x[c] - b.x[c]) * il * il);
    }
    return;
  }
  const double f = w * v * (-2.0 * kPi * k.inv_l2 / k.period);
  for (Index c = 0; c < d; ++c) out[c] += f * 2.0 * phase_sin(a, b, c) * phase_cos(a, b, c);
}

bool is_leaf(const Kernel& k) {
  return k.kind() == KernelKind::SquaredExponential || k.kind() == KernelKind::Periodic;
}

void check_leaf_width(const Kernel& k, Index d) {
  if (k.kind() == KernelKind::SquaredExponential && k.ard() &&
      static_cast<Index>(k.log_lengthscales().size()) != d) {
    throw InputError("ARD squared exponential has " + std::to_string(k.log_lengthscales().size()) +
                     " lengthscales but receives " + std::to_string(d) + " input columns");
  }
}

MatrixXd project(const MatrixXd& X, const std::vector<Index>& dims) {
  MatrixXd out(X.rows(), static_cast<Index>(dims.size()));
  for (std::size_t c = 0; c < dims.size(); ++c) {
    if (dims[c] >= X.cols()) {
      throw InputError("active dimension " + std::to_string(dims[c]) + " out of range for " +
                       std::to_string(X.cols()) + "-column input");
    }
    out.col(static_cast<Index>(c)) = X.col(dims[c]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-entry reference recursion.

double eval_rec(const Kernel& k, const VectorXd& x, const VectorXd& x2) {
  switch (k.kind()) {
    case KernelKind::SquaredExponential:
    case KernelKind::Periodic: {
      check_leaf_width(k, x.size());
      const Leaf leaf(k);
      const Rows ra = rows_of(leaf, x.transpose()), rb = rows_of(leaf, x2.transpose());
      return leaf_value(leaf, pt(ra, 0), pt(rb, 0), x.size());
    }
    case KernelKind::Sum: {
      double v = eval_rec(k.children()[0], x, x2);
      for (std::size_t c = 1; c < k.children().size(); ++c) v += eval_rec(k.children()[c], x, x2);
      return v;
    }
    case KernelKind::Product: {
      double v = eval_rec(k.children()[0], x, x2);
      for (std::size_t c = 1; c < k.children().size(); ++c) v *= eval_rec(k.children()[c], x, x2);
      return v;
    }
    case KernelKind::ActiveDims: {
      VectorXd px(static_cast<Index>(k.dims().size())), px2(px.size());
      for (std::size_t c = 0; c < k.dims().size(); ++c) {
        if (k.dims()[c] >= x.size()) {
          throw InputError("active dimension " + std::to_string(k.dims()[c]) +
                           " out of range for " + std::to_string(x.size()) + "-column input");
        }
        px[static_cast<Index>(c)] = x[k.dims()[c]];
        px2[static_cast<Index>(c)] = x2[k.dims()[c]];
      }
      return eval_rec(k.children()[0], px, px2);
    }
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Matrix recursion (OpenMP over columns of the output).

MatrixXd leaf_gram(const Kernel& k, const MatrixXd& X, const MatrixXd& X2) {
  check_leaf_width(k, X.cols());
  const Leaf leaf(k);
  const Rows ra = rows_of(leaf, X), rb = rows_of(leaf, X2);
  const Index n = X.rows(), m = X2.rows(), d = X.cols();
  MatrixXd out(n, m);
#pragma omp parallel for schedule(static)
  for (Index j = 0; j < m; ++j) {
    const Pt b = pt(rb, j);
    for (Index i = 0; i < n; ++i) out(i, j) = leaf_value(leaf, pt(ra, i), b, d);
  }
  return out;
}

MatrixXd gram_rec(const Kernel& k, const MatrixXd& X, const MatrixXd& X2) {
  switch (k.kind()) {
    case KernelKind::SquaredExponential:
    case KernelKind::Periodic:
      return leaf_gram(k, X, X2);
    case KernelKind::Sum: {
      MatrixXd out = gram_rec(k.children()[0], X, X2);
      for (std::size_t c = 1; c < k.children().size(); ++c) out += gram_rec(k.children()[c], X, X2);
      return out;
    }
    case KernelKind::Product: {
      MatrixXd out = gram_rec(k.children()[0], X, X2);
      for (std::size_t c = 1; c < k.children().size(); ++c)
        out.array() *= gram_rec(k.children()[c], X, X2).array();
      return out;
    }
    case KernelKind::ActiveDims:
      return gram_rec(k.children()[0], project(X, k.dims()), project(X2, k.dims()));
  }
  return {};
}

// Product of all children's Gram matrices except `skip`.
MatrixXd product_except(const std::vector<MatrixXd>& grams, std::size_t skip) {
  MatrixXd out = MatrixXd::Ones(grams[0].rows(), grams[0].cols());
  for (std::size_t c = 0; c < grams.size(); ++c)
    if (c != skip) out.array() *= grams[c].array();
  return out;
}

void grad_gram_rec(const Kernel& k, const MatrixXd& X, const MatrixXd& X2,
                   std::vector<MatrixXd>& out) {
  switch (k.kind()) {
    case KernelKind::SquaredExponential:
    case KernelKind::Periodic: {
      check_leaf_width(k, X.cols());
      const Leaf leaf(k);
      const std::size_t p = k.num_params();
      const std::size_t base = out.size();
      for (std::size_t t = 0; t < p; ++t) out.emplace_back(X.rows(), X2.rows());
      const Rows ra = rows_of(leaf, X), rb = rows_of(leaf, X2);
      const Index d = X.cols();
#pragma omp parallel for schedule(static)
      for (Index j = 0; j < X2.rows(); ++j) {
        std::vector<double> g(p);
        for (Index i = 0; i < X.rows(); ++i) {
          leaf_value_grad(leaf, pt(ra, i), pt(rb, j), d, g.data());
          for (std::size_t t = 0; t < p; ++t) out[base + t](i, j) = g[t];
        }
      }
      return;
    }
    case KernelKind::Sum:
      for (const auto& c : k.children()) grad_gram_rec(c, X, X2, out);
      return;
    case KernelKind::Product: {
      std::vector<MatrixXd> grams;
      for (const auto& c : k.children()) grams.push_back(gram_rec(c, X, X2));
      for (std::size_t c = 0; c < k.children().size(); ++c) {
        const std::size_t base = out.size();
        grad_gram_rec(k.children()[c], X, X2, out);
        const MatrixXd others = product_except(grams, c);
        for (std::size_t t = base; t < out.size(); ++t) out[t].array() *= others.array();
      }
      return;
    }
    case KernelKind::ActiveDims:
      grad_gram_rec(k.children()[0], project(X, k.dims()), project(X2, k.dims()), out);
      return;
  }
}

void grad_contracted_rec(const Kernel& k, const MatrixXd& X, const MatrixXd& X2,
                         const MatrixXd& w, std::vector<double>& out) {
  switch (k.kind()) {
    case KernelKind::SquaredExponential:
    case KernelKind::Periodic: {
      check_leaf_width(k, X.cols());
      const Leaf leaf(k);
      const std::size_t p = k.num_params();
      const Rows ra = rows_of(leaf, X), rb = rows_of(leaf, X2);
      const Index d = X.cols(), m = X2.rows();
      // Per-column partials, reduced serially afterwards for a fixed order.
      MatrixXd partial = MatrixXd::Zero(static_cast<Index>(p), m);
#pragma omp parallel for schedule(static)
      for (Index j = 0; j < m; ++j) {
        std::vector<double> g(p);
        for (Index i = 0; i < X.rows(); ++i) {
          const double wij = w(i, j);
          if (wij == 0.0) continue;
          leaf_value_grad(leaf, pt(ra, i), pt(rb, j), d, g.data());
          for (std::size_t t = 0; t < p; ++t) partial(static_cast<Index>(t), j) += wij * g[t];
        }
      }
      for (std::size_t t = 0; t < p; ++t) {
        double s = 0.0;
        for (Index j = 0; j < m; ++j) s += partial(static_cast<Index>(t), j);
        out.push_back(s);
      }
      return;
    }
    case KernelKind::Sum:
      for (const auto& c : k.children()) grad_contracted_rec(c, X, X2, w, out);
      return;
    case KernelKind::Product: {
      std::vector<MatrixXd> grams;
      for (const auto& c : k.children()) grams.push_back(gram_rec(c, X, X2));
      for (std::size_t c = 0; c < k.children().size(); ++c) {
        const MatrixXd wc = (w.array() * product_except(grams, c).array()).matrix();
        grad_contracted_rec(k.children()[c], X, X2, wc, out);
      }
      return;
    }
    case KernelKind::ActiveDims:
      grad_contracted_rec(k.children()[0], project(X, k.dims()), project(X2, k.dims()), w, out);
      return;
  }
}

void grad_inputs_rec(const Kernel& k, const MatrixXd& X, const MatrixXd& X2, const MatrixXd& w,
                     MatrixXd& out) {
  switch (k.kind()) {
    case KernelKind::SquaredExponential:
    case KernelKind::Periodic: {
      check_leaf_width(k, X.cols());
      const Leaf leaf(k);
      const Rows ra = rows_of(leaf, X), rb = rows_of(leaf, X2);
      const Index d = X.cols();
      MatrixXd acc = MatrixXd::Zero(d, X.rows());
#pragma omp parallel for schedule(static)
      for (Index i = 0; i < X.rows(); ++i) {
        for (Index j = 0; j < X2.rows(); ++j) {
          const double wij = w(i, j);
          if (wij == 0.0) continue;
          leaf_input_grad(leaf, pt(ra, i), pt(rb, j), d, wij, acc.col(i).data());
        }
      }
      out += acc.transpose();
      return;
    }
    case KernelKind::Sum:
      for (const auto& c : k.children()) grad_inputs_rec(c, X, X2, w, out);
      return;
    case KernelKind::Product: {
      std::vector<MatrixXd> grams;
      for (const auto& c : k.children()) grams.push_back(gram_rec(c, X, X2));
      for (std::size_t c = 0; c < k.children().size(); ++c) {
        const MatrixXd wc = (w.array() * product_except(grams, c).array()).matrix();
        grad_inputs_rec(k.children()[c], X, X2, wc, out);
      }
      return;
    }
    case KernelKind::ActiveDims: {
      MatrixXd sub = MatrixXd::Zero(X.rows(), static_cast<Index>(k.dims().size()));
      grad_inputs_rec(k.children()[0], project(X, k.dims()), project(X2, k.dims()), w, sub);
      for (std::size_t c = 0; c < k.dims().size(); ++c)
        out.col(k.dims()[c]) += sub.col(static_cast<Index>(c));
      return;
    }
  }
}

void grad_diag_rec(const Kernel& k, std::vector<double>& out) {
  switch (k.kind()) {
    case KernelKind::SquaredExponential:
    case KernelKind::Periodic:
      out.push_back(k.variance());
      for (std::size_t t = 1; t < k.num_params(); ++t) out.push_back(0.0);
      return;
    case KernelKind::Sum:
      for (const auto& c : k.children()) grad_diag_rec(c, out);
      return;
    case KernelKind::Product:
      for (std::size_t c = 0; c < k.children().size(); ++c) {
        double others = 1.0;
        for (std::size_t o = 0; o < k.children().size(); ++o)
          if (o != c) others *= k.children()[o].diag_value();
        const std::size_t base = out.size();
        grad_diag_rec(k.children()[c], out);
        for (std::size_t t = base; t < out.size(); ++t) out[t] *= others;
      }
      return;
    case KernelKind::ActiveDims:
      grad_diag_rec(k.children()[0], out);
      return;
  }
}

void check_shapes(const Kernel& k, const MatrixXd& X, const MatrixXd& X2) {
  if (X.cols() != X2.cols()) {
    throw InputError("gram: inputs have " + std::to_string(X.cols()) + " and " +
                     std::to_string(X2.cols()) + " columns");
  }
  k.validate(X.cols());
}

}  // namespace

// ---------------------------------------------------------------------------
// Kernel construction and parameter plumbing.

Kernel Kernel::squared_exponential(double variance, double lengthscale) {
  if (!(variance > 0.0) || !(lengthscale > 0.0)) throw InputError("SE: variance and lengthscale must be positive");
  Kernel k;
  k.kind_ = KernelKind::SquaredExponential;
  k.log_variance_ = std::log(variance);
  k.log_lengthscales_ = {std::log(lengthscale)};
  return k;
}

Kernel Kernel::squared_exponential_ard(std::vector<double> lengthscales, double variance) {
  if (lengthscales.empty()) throw InputError("ARD SE needs at least one lengthscale");
  Kernel k = squared_exponential(variance, 1.0);
  k.ard_ = true;
  k.log_lengthscales_.clear();
  for (double l : lengthscales) {
    if (!(l > 0.0)) throw InputError("SE: lengthscales must be positive");
    k.log_lengthscales_.push_back(std::log(l));
  }
  return k;
}

Kernel Kernel::periodic(double period, double variance, double lengthscale, bool learn_period) {
  if (!(period > 0.0) || !(variance > 0.0) || !(lengthscale > 0.0))
    throw InputError("periodic: period, variance and lengthscale must be positive");
  Kernel k;
  k.kind_ = KernelKind::Periodic;
  k.log_variance_ = std::log(variance);
  k.log_lengthscales_ = {std::log(lengthscale)};
  k.log_period_ = std::log(period);
  k.learn_period_ = learn_period;
  return k;
}

Kernel Kernel::sum(std::vector<Kernel> children) {
  if (children.empty()) throw InputError("sum kernel needs at least one child");
  Kernel k;
  k.kind_ = KernelKind::Sum;
  k.children_ = std::move(children);
  return k;
}

Kernel Kernel::product(std::vector<Kernel> children) {
  if (children.empty()) throw InputError("product kernel needs at least one child");
  Kernel k;
  k.kind_ = KernelKind::Product;
  k.children_ = std::move(children);
  return k;
}

Kernel Kernel::active_dims(std::vector<Index> dims, Kernel child) {
  if (dims.empty()) throw InputError("active_dims needs at least one dimension");
  std::set<Index> seen;
  for (Index d : dims) {
    if (d < 0) throw InputError("active dimension must be non-negative");
    if (!seen.insert(d).second) throw InputError("active dimension " + std::to_string(d) + " repeated");
  }
  Kernel k;
  k.kind_ = KernelKind::ActiveDims;
  k.dims_ = std::move(dims);
  k.children_.push_back(std::move(child));
  k.children_[0].validate(static_cast<Index>(k.dims_.size()));
  return k;
}

std::size_t Kernel::num_params() const {
  if (is_leaf(*this)) {
    return 1 + log_lengthscales_.size() + (kind_ == KernelKind::Periodic && learn_period_ ? 1 : 0);
  }
  std::size_t n = 0;
  for (const auto& c : children_) n += c.num_params();
  return n;
}

std::size_t Kernel::write_params(double* out) const {
  if (!is_leaf(*this)) {
    std::size_t n = 0;
    for (const auto& c : children_) n += c.write_params(out + n);
    return n;
  }
  std::size_t n = 0;
  out[n++] = log_variance_;
  for (double l : log_lengthscales_) out[n++] = l;
  if (kind_ == KernelKind::Periodic && learn_period_) out[n++] = log_period_;
  return n;
}

std::size_t Kernel::read_params(const double* in) {
  if (!is_leaf(*this)) {
    std::size_t n = 0;
    for (auto& c : children_) n += c.read_params(in + n);
    return n;
  }
  std::size_t n = 0;
  log_variance_ = in[n++];
  for (double& l : log_lengthscales_) l = in[n++];
  if (kind_ == KernelKind::Periodic && learn_period_) log_period_ = in[n++];
  return n;
}

VectorXd Kernel::log_params() const {
  VectorXd theta(static_cast<Index>(num_params()));
  write_params(theta.data());
  return theta;
}

void Kernel::set_log_params(const VectorXd& theta) {
  if (static_cast<std::size_t>(theta.size()) != num_params()) {
    throw InputError("kernel expects " + std::to_string(num_params()) + " parameters, got " +
                     std::to_string(theta.size()));
  }
  read_params(theta.data());
}

void Kernel::append_names(const std::string& prefix, std::vector<std::string>& out) const {
  switch (kind_) {
    case KernelKind::SquaredExponential:
    case KernelKind::Periodic: {
      const std::string leaf = prefix + (kind_ == KernelKind::Periodic ? "periodic" : "se");
      out.push_back(leaf + ".log_variance");
      if (log_lengthscales_.size() == 1) {
        out.push_back(leaf + ".log_lengthscale");
      } else {
        for (std::size_t c = 0; c < log_lengthscales_.size(); ++c)
          out.push_back(leaf + ".log_lengthscale[" + std::to_string(c) + "]");
      }
      if (kind_ == KernelKind::Periodic && learn_period_) out.push_back(leaf + ".log_period");
      return;
    }
    case KernelKind::Sum:
    case KernelKind::Product:
      for (std::size_t c = 0; c < children_.size(); ++c)
        children_[c].append_names(prefix + (kind_ == KernelKind::Sum ? "sum" : "product") + "[" +
                                      std::to_string(c) + "].",
                                  out);
      return;
    case KernelKind::ActiveDims:
      children_[0].append_names(prefix, out);
      return;
  }
}

std::vector<std::string> Kernel::param_names() const {
  std::vector<std::string> names;
  append_names("", names);
  return names;
}

Index Kernel::min_input_dim() const {
  switch (kind_) {
    case KernelKind::SquaredExponential:
      return ard_ ? static_cast<Index>(log_lengthscales_.size()) : 1;
    case KernelKind::Periodic:
      return 1;
    case KernelKind::Sum:
    case KernelKind::Product: {
      Index d = 1;
      for (const auto& c : children_) d = std::max(d, c.min_input_dim());
      return d;
    }
    case KernelKind::ActiveDims:
      return *std::max_element(dims_.begin(), dims_.end()) + 1;
  }
  return 1;
}

double Kernel::diag_value() const {
  switch (kind_) {
    case KernelKind::SquaredExponential:
    case KernelKind::Periodic:
      return variance();
    case KernelKind::Sum: {
      double v = 0.0;
      for (const auto& c : children_) v += c.diag_value();
      return v;
    }
    case KernelKind::Product: {
      double v = 1.0;
      for (const auto& c : children_) v *= c.diag_value();
      return v;
    }
    case KernelKind::ActiveDims:
      return children_[0].diag_value();
  }
  return 0.0;
}

void Kernel::validate(Index d) const {
  switch (kind_) {
    case KernelKind::SquaredExponential:
    case KernelKind::Periodic:
      check_leaf_width(*this, d);
      return;
    case KernelKind::Sum:
    case KernelKind::Product:
      for (const auto& c : children_) c.validate(d);
      return;
    case KernelKind::ActiveDims:
      for (Index dim : dims_) {
        if (dim >= d) {
          throw InputError("active dimension " + std::to_string(dim) + " out of range for " +
                           std::to_string(d) + "-column input");
        }
      }
      return;
  }
}

// ---------------------------------------------------------------------------

double eval(const Kernel& k, const VectorXd& x, const VectorXd& x2) {
  if (x.size() != x2.size()) {
    throw InputError("eval: inputs have dimension " + std::to_string(x.size()) + " and " +
                     std::to_string(x2.size()));
  }
  k.validate(x.size());
  return eval_rec(k, x, x2);
}

MatrixXd gram(const Kernel& k, const MatrixXd& X, const MatrixXd& X2) {
  check_shapes(k, X, X2);
  return gram_rec(k, X, X2);
}

MatrixXd gram_serial(const Kernel& k, const MatrixXd& X, const MatrixXd& X2) {
  check_shapes(k, X, X2);
  MatrixXd out(X.rows(), X2.rows());
  for (Index j = 0; j < X2.rows(); ++j) {
    const VectorXd b = X2.row(j).transpose();
    for (Index i = 0; i < X.rows(); ++i) out(i, j) = eval_rec(k, X.row(i).transpose(), b);
  }
  return out;
}

std::vector<MatrixXd> grad_gram(const Kernel& k, const MatrixXd& X) { return grad_gram(k, X, X); }

std::vector<MatrixXd> grad_gram(const Kernel& k, const MatrixXd& X, const MatrixXd& X2) {
  check_shapes(k, X, X2);
  std::vector<MatrixXd> out;
  out.reserve(k.num_params());
  grad_gram_rec(k, X, X2, out);
  return out;
}

VectorXd grad_gram_contracted(const Kernel& k, const MatrixXd& X, const MatrixXd& X2,
                              const MatrixXd& weights) {
  check_shapes(k, X, X2);
  if (weights.rows() != X.rows() || weights.cols() != X2.rows())
    throw InputError("grad_gram_contracted: weight matrix shape mismatch");
  std::vector<double> out;
  out.reserve(k.num_params());
  grad_contracted_rec(k, X, X2, weights, out);
  return Eigen::Map<VectorXd>(out.data(), static_cast<Index>(out.size()));
}

MatrixXd grad_inputs_contracted(const Kernel& k, const MatrixXd& X, const MatrixXd& X2,
                                const MatrixXd& weights) {
  check_shapes(k, X, X2);
  if (weights.rows() != X.rows() || weights.cols() != X2.rows())
    throw InputError("grad_inputs_contracted: weight matrix shape mismatch");
  MatrixXd out = MatrixXd::Zero(X.rows(), X.cols());
  grad_inputs_rec(k, X, X2, weights, out);
  return out;
}

VectorXd grad_diag(const Kernel& k) {
  std::vector<double> out;
  grad_diag_rec(k, out);
  return Eigen::Map<VectorXd>(out.data(), static_cast<Index>(out.size()));
}

// ---------------------------------------------------------------------------
// JSON form.

namespace {

using nlohmann::json;

std::vector<Index> read_dims(const json& j) {
  std::vector<Index> dims;
  for (const auto& d : j) dims.push_back(d.get<Index>());
  return dims;
}

Kernel leaf_from_json(const std::string& kind, const json& body,
                      std::optional<std::span<const double>> scales) {
  static const std::set<std::string> se_keys = {"dims", "variance", "lengthscale", "ard",
                                                "log_variance", "log_lengthscale"};
  static const std::set<std::string> per_keys = {"dims",         "variance",        "lengthscale",
                                                 "period",       "learn_period",    "log_variance",
                                                 "log_lengthscale", "log_period"};
  const auto& allowed = kind == "se" ? se_keys : per_keys;
  if (!body.is_object()) throw InputError("kernel '" + kind + "' expects an object");
  for (const auto& [key, _] : body.items()) {
    if (!allowed.count(key)) throw InputError("unknown key '" + key + "' in kernel '" + kind + "'");
  }

  std::optional<std::vector<Index>> dims;
  if (body.contains("dims")) dims = read_dims(body.at("dims"));

  const double variance = body.contains("log_variance")
                              ? std::exp(body.at("log_variance").get<double>())
                              : body.value("variance", 1.0);

  Kernel leaf = Kernel::squared_exponential();
  if (kind == "se") {
    std::vector<double> ls;
    if (body.contains("log_lengthscale")) {
      const auto& v = body.at("log_lengthscale");
      if (v.is_array())
        for (const auto& e : v) ls.push_back(std::exp(e.get<double>()));
      else
        ls.push_back(std::exp(v.get<double>()));
    } else if (body.contains("lengthscale")) {
      const auto& v = body.at("lengthscale");
      if (v.is_array())
        for (const auto& e : v) ls.push_back(e.get<double>());
      else
        ls.push_back(v.get<double>());
    }
    const bool ard = body.value("ard", ls.size() > 1);
    if (ard) {
      if (ls.size() <= 1) {
        if (!dims) throw InputError("ARD squared exponential needs 'dims' or a lengthscale array");
        ls.assign(dims->size(), ls.empty() ? 1.0 : ls[0]);
      }
      leaf = Kernel::squared_exponential_ard(ls, variance);
    } else {
      leaf = Kernel::squared_exponential(variance, ls.empty() ? 1.0 : ls[0]);
    }
  } else {
    double period;
    if (body.contains("log_period")) {
      period = std::exp(body.at("log_period").get<double>());
    } else if (body.contains("period")) {
      period = body.at("period").get<double>();
      if (scales && dims) {
        const Index col = dims->front();
        if (col >= static_cast<Index>(scales->size()))
          throw InputError("periodic dims refer to column " + std::to_string(col) +
                           " beyond the dataset schema");
        period /= (*scales)[static_cast<std::size_t>(col)];
      }
    } else {
      throw InputError("periodic kernel needs 'period'");
    }
    const double ls = body.contains("log_lengthscale")
                          ? std::exp(body.at("log_lengthscale").get<double>())
                          : body.value("lengthscale", 1.0);
    leaf = Kernel::periodic(period, variance, ls, body.value("learn_period", false));
  }
  return dims ? Kernel::active_dims(*dims, std::move(leaf)) : leaf;
}

}  // namespace

Kernel kernel_from_json(const json& j, std::optional<std::span<const double>> column_scales) {
  if (!j.is_object() || j.size() != 1)
    throw InputError("kernel expression must be an object with exactly one key");
  const auto& [key, body] = *j.items().begin();
  if (key == "se" || key == "rbf") return leaf_from_json("se", body, column_scales);
  if (key == "periodic") return leaf_from_json("periodic", body, column_scales);
  if (key == "sum" || key == "product") {
    if (!body.is_array() || body.empty()) throw InputError("'" + key + "' expects a non-empty array");
    std::vector<Kernel> children;
    for (const auto& c : body) children.push_back(kernel_from_json(c, column_scales));
    return key == "sum" ? Kernel::sum(std::move(children)) : Kernel::product(std::move(children));
  }
  if (key == "active_dims") {
    for (const auto& [k, _] : body.items())
      if (k != "dims" && k != "kernel") throw InputError("unknown key '" + k + "' in 'active_dims'");
    return Kernel::active_dims(read_dims(body.at("dims")),
                               kernel_from_json(body.at("kernel"), column_scales));
  }
  throw InputError("unknown kernel type '" + key + "'");
}

namespace {

json leaf_to_json(const Kernel& k, const std::vector<Index>* dims) {
  json body;
  if (dims) body["dims"] = *dims;
  body["log_variance"] = std::log(k.variance());
  if (k.kind() == KernelKind::SquaredExponential) {
    if (k.ard())
      body["log_lengthscale"] = k.log_lengthscales();
    else
      body["log_lengthscale"] = k.log_lengthscales()[0];
    body["ard"] = k.ard();
    return {{"se", body}};
  }
  body["log_lengthscale"] = k.log_lengthscales()[0];
  body["log_period"] = std::log(k.period());
  body["learn_period"] = k.learn_period();
  return {{"periodic", body}};
}

}  // namespace

json kernel_to_json(const Kernel& k) {
  switch (k.kind()) {
    case KernelKind::SquaredExponential:
    case KernelKind::Periodic:
      return leaf_to_json(k, nullptr);
    case KernelKind::Sum:
    case KernelKind::Product: {
      json arr = json::array();
      for (const auto& c : k.children()) arr.push_back(kernel_to_json(c));
      return {{k.kind() == KernelKind::Sum ? "sum" : "product", arr}};
    }
    case KernelKind::ActiveDims:
      if (is_leaf(k.children()[0])) return leaf_to_json(k.children()[0], &k.dims());
      return {{"active_dims", {{"dims", k.dims()}, {"kernel", kernel_to_json(k.children()[0])}}}};
  }
  return {};
}

}  // namespace stgp
