#pragma once

#include "stgp/common.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace stgp {

enum class KernelKind { SquaredExponential, Periodic, Sum, Product, ActiveDims };

/// Composable covariance expression.
///
/// Leaves (SquaredExponential, Periodic) act on every column they receive;
/// an ActiveDims node projects its input onto a column subset before passing
/// it to its single child. All positive hyperparameters are held as logs.
///
/// Hyperparameter ordering is depth-first over the tree. Within a leaf the
/// order is: log variance, log lengthscale(s), then log period when the period
/// is learnable. Fixed periods are not parameters.
///
/// Leaves:
///   SE:        s2 * exp(-|x - x'|^2 / (2 l^2))            (or per-dim l with ARD)
///   Periodic:  s2 * exp(-2 sum_k sin^2(pi (x_k - x'_k) / p) / l^2)
class Kernel {
 public:
  static Kernel squared_exponential(double variance = 1.0, double lengthscale = 1.0);
  /// SE with one lengthscale per input column.
  static Kernel squared_exponential_ard(std::vector<double> lengthscales, double variance = 1.0);
  static Kernel periodic(double period, double variance = 1.0, double lengthscale = 1.0,
                         bool learn_period = false);
  static Kernel sum(std::vector<Kernel> children);
  static Kernel product(std::vector<Kernel> children);
  static Kernel active_dims(std::vector<Index> dims, Kernel child);

  KernelKind kind() const { return kind_; }
  const std::vector<Kernel>& children() const { return children_; }
  const std::vector<Index>& dims() const { return dims_; }

  double variance() const { return std::exp(log_variance_); }
  const std::vector<double>& log_lengthscales() const { return log_lengthscales_; }
  bool ard() const { return ard_; }
  double period() const { return std::exp(log_period_); }
  bool learn_period() const { return learn_period_; }

  std::size_t num_params() const;
  VectorXd log_params() const;
  void set_log_params(const VectorXd& theta);
  std::vector<std::string> param_names() const;

  /// Smallest input width this expression can be evaluated on.
  Index min_input_dim() const;
  /// k(x, x); every supported expression is stationary.
  double diag_value() const;

  /// Throws InputError if the expression cannot be applied to `d` columns.
  void validate(Index d) const;

 private:
  Kernel() = default;
  std::size_t write_params(double* out) const;
  std::size_t read_params(const double* in);
  void append_names(const std::string& prefix, std::vector<std::string>& out) const;

  KernelKind kind_ = KernelKind::SquaredExponential;
  std::vector<Kernel> children_;
  std::vector<Index> dims_;
  double log_variance_ = 0.0;
  std::vector<double> log_lengthscales_{0.0};
  bool ard_ = false;
  double log_period_ = 0.0;
  bool learn_period_ = false;
};

/// Covariance of two input vectors.
double eval(const Kernel& k, const VectorXd& x, const VectorXd& x2);

/// Gram matrix, rows of X against rows of X2. Leaf evaluation is
/// OpenMP-parallel over rows; each entry is computed exactly as
/// `gram_serial` computes it, so the two agree bit for bit.
MatrixXd gram(const Kernel& k, const MatrixXd& X, const MatrixXd& X2);
inline MatrixXd gram(const Kernel& k, const MatrixXd& X) { return gram(k, X, X); }

/// Reference implementation: entry-by-entry `eval`, single-threaded.
MatrixXd gram_serial(const Kernel& k, const MatrixXd& X, const MatrixXd& X2);

/// dK/dtheta_t for every log-hyperparameter, in `log_params` order.
std::vector<MatrixXd> grad_gram(const Kernel& k, const MatrixXd& X);
std::vector<MatrixXd> grad_gram(const Kernel& k, const MatrixXd& X, const MatrixXd& X2);

/// sum_ij G_ij dK_ij/dtheta_t for every t, without materializing dK.
VectorXd grad_gram_contracted(const Kernel& k, const MatrixXd& X, const MatrixXd& X2,
                              const MatrixXd& weights);

/// Row i of the result is sum_j G_ij d k(x_i, x2_j) / d x_i.
MatrixXd grad_inputs_contracted(const Kernel& k, const MatrixXd& X, const MatrixXd& X2,
                                const MatrixXd& weights);

/// d k(x, x) / d theta; constant in x for stationary expressions.
VectorXd grad_diag(const Kernel& k);

/// Build from the nested config form, e.g.
///   {"sum": [{"se": {"dims": [0, 1]}},
///            {"product": [{"periodic": {"dims": [2], "period": 24}},
///                         {"periodic": {"dims": [2], "period": 168}}]}]}
/// Periods given as "period" are in raw column units and are divided by
/// `column_scales[dims[0]]` when scales are supplied. "log_*" keys are taken
/// verbatim (normalized units), which is what `kernel_to_json` writes.
Kernel kernel_from_json(const nlohmann::json& j,
                        std::optional<std::span<const double>> column_scales = std::nullopt);
nlohmann::json kernel_to_json(const Kernel& k);

}  // namespace stgp
