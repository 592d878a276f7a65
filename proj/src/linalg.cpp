#include "stgp/linalg.hpp"

#include <sstream>

namespace stgp {

VectorXd Cholesky::solve(const VectorXd& b) const {
  VectorXd x = lower.triangularView<Eigen::Lower>().solve(b);
  lower.triangularView<Eigen::Lower>().transpose().solveInPlace(x);
  return x;
}

MatrixXd Cholesky::solve(const MatrixXd& b) const {
  MatrixXd x = lower.triangularView<Eigen::Lower>().solve(b);
  lower.triangularView<Eigen::Lower>().transpose().solveInPlace(x);
  return x;
}

MatrixXd Cholesky::solve_lower(const MatrixXd& b) const {
  return lower.triangularView<Eigen::Lower>().solve(b);
}

double Cholesky::log_det() const { return 2.0 * lower.diagonal().array().log().sum(); }

MatrixXd Cholesky::inverse() const {
  // A^{-1} = L^{-T} L^{-1}: one triangular solve and a symmetric rank update.
  const Index n = lower.rows();
  const MatrixXd linv = solve_lower(MatrixXd::Identity(n, n));
  MatrixXd out = MatrixXd::Zero(n, n);
  out.selfadjointView<Eigen::Lower>().rankUpdate(linv.transpose());
  out.triangularView<Eigen::StrictlyUpper>() = out.transpose();
  return out;
}

Cholesky robust_cholesky(const MatrixXd& a) {
  if (a.rows() != a.cols()) throw InputError("cholesky: matrix is not square");
  if (a.rows() == 0) return {MatrixXd(0, 0), 0.0};

  Eigen::LLT<MatrixXd> llt(a);
  if (llt.info() == Eigen::Success && llt.matrixL().toDenseMatrix().allFinite()) {
    return {llt.matrixL(), 0.0};
  }

  const double mean_diag = a.diagonal().mean();
  std::vector<double> tried;
  if (std::isfinite(mean_diag) && mean_diag > 0.0) {
    for (double rel = 1e-8; rel <= 1e-2 * (1.0 + 1e-9); rel *= 10.0) {
      const double jitter = rel * mean_diag;
      tried.push_back(jitter);
      MatrixXd b = a;
      b.diagonal().array() += jitter;
      llt.compute(b);
      if (llt.info() == Eigen::Success) return {llt.matrixL(), jitter};
    }
  }
  std::ostringstream msg;
  msg << "cholesky failed on " << a.rows() << "x" << a.cols() << " matrix; jitter tried:";
  for (double j : tried) msg << ' ' << j;
  if (tried.empty()) msg << " none (non-positive or non-finite diagonal)";
  throw NumericalError(msg.str(), tried);
}

MatrixXd cholesky_backward(const MatrixXd& lower, const MatrixXd& lower_bar) {
  // P = Phi(L^T Lbar), Kbar = sym(L^{-T} P L^{-1}) where Phi keeps the lower
  // triangle and halves the diagonal.
  MatrixXd p = (lower.transpose() * lower_bar.triangularView<Eigen::Lower>().toDenseMatrix())
                   .triangularView<Eigen::Lower>();
  p.diagonal() *= 0.5;
  const auto l = lower.triangularView<Eigen::Lower>();
  MatrixXd s = l.transpose().solve(p);                   // L^{-T} P
  s = l.transpose().solve(s.transpose()).transpose();    // (L^{-T} P) L^{-1}
  return 0.5 * (s + s.transpose());
}

}  // namespace stgp
