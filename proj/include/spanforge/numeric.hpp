#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>

namespace spanforge {

using Vec64 = Eigen::VectorXd;
using Mat64 = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Entries carrying this value are excluded from a distribution.
template <typename Scalar = double>
constexpr Scalar mask_value() {
  return std::numeric_limits<Scalar>::lowest();
}

template <typename Scalar>
constexpr bool is_masked(Scalar x) {
  return x == mask_value<Scalar>();
}

// Shift-stable softmax; masked entries map to exactly zero.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> softmax(
    const Eigen::MatrixBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  if (v.size() == 0) throw std::invalid_argument("softmax: empty input");
  Scalar hi = mask_value<Scalar>();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!is_masked(v(i))) {
      if (!std::isfinite(v(i))) throw std::invalid_argument("softmax: non-finite entry");
      hi = std::max(hi, v(i));
    }
  }
  if (is_masked(hi)) throw std::invalid_argument("softmax: every entry is masked");
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> out(v.size());
  Scalar total = 0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    out(i) = is_masked(v(i)) ? Scalar(0) : std::exp(v(i) - hi);
    total += out(i);
  }
  return out / total;
}

// log-softmax with the same masking contract; masked entries get -inf.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> log_softmax(
    const Eigen::MatrixBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  if (v.size() == 0) throw std::invalid_argument("log_softmax: empty input");
  Scalar hi = mask_value<Scalar>();
  for (Eigen::Index i = 0; i < v.size(); ++i)
    if (!is_masked(v(i))) hi = std::max(hi, v(i));
  if (is_masked(hi)) throw std::invalid_argument("log_softmax: every entry is masked");
  Scalar total = 0;
  for (Eigen::Index i = 0; i < v.size(); ++i)
    if (!is_masked(v(i))) total += std::exp(v(i) - hi);
  const Scalar lse = hi + std::log(total);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> out(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i)
    out(i) = is_masked(v(i)) ? -std::numeric_limits<Scalar>::infinity() : v(i) - lse;
  return out;
}

template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::MatrixBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  if (v.size() == 0) throw std::invalid_argument("log_sum_exp: empty input");
  const Scalar hi = v.maxCoeff();
  if (!std::isfinite(hi)) return hi;
  return hi + std::log((v.array() - hi).exp().sum());
}

template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar cosine_sim(const Eigen::MatrixBase<DerivedA>& u,
                                     const Eigen::MatrixBase<DerivedB>& v) {
  if (u.size() != v.size()) throw std::invalid_argument("cosine_sim: length mismatch");
  const auto nu = u.norm();
  const auto nv = v.norm();
  if (!(nu > 0) || !(nv > 0)) throw std::invalid_argument("cosine_sim: zero-norm input");
  const auto c = u.dot(v) / (nu * nv);
  return std::clamp(c, decltype(c)(-1), decltype(c)(1));
}

// Gradients of cosine_sim(u, v) with respect to u and v.
template <typename Scalar>
struct CosineGrad {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> du;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dv;
};

template <typename DerivedA, typename DerivedB>
CosineGrad<typename DerivedA::Scalar> cosine_sim_grad(const Eigen::MatrixBase<DerivedA>& u,
                                                      const Eigen::MatrixBase<DerivedB>& v) {
  const auto nu = u.norm();
  const auto nv = v.norm();
  if (!(nu > 0) || !(nv > 0)) throw std::invalid_argument("cosine_sim_grad: zero-norm input");
  const auto c = u.dot(v) / (nu * nv);
  return {v / (nu * nv) - c * u / (nu * nu), u / (nu * nv) - c * v / (nv * nv)};
}

// Arithmetic mean of the selected rows.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> mean_pool(
    const Eigen::MatrixBase<Derived>& rows, std::span<const int> index_set) {
  if (index_set.empty()) throw std::invalid_argument("mean_pool: empty index set");
  Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> acc =
      Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1>::Zero(rows.cols());
  for (int i : index_set) {
    if (i < 0 || i >= rows.rows()) throw std::out_of_range("mean_pool: index out of range");
    acc += rows.row(i).transpose();
  }
  return acc / static_cast<typename Derived::Scalar>(index_set.size());
}

// Mean over the contiguous row range [first, last].
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> mean_pool_range(
    const Eigen::MatrixBase<Derived>& rows, int first, int last) {
  if (first > last) throw std::invalid_argument("mean_pool: empty index set");
  if (first < 0 || last >= rows.rows()) throw std::out_of_range("mean_pool: index out of range");
  return rows.middleRows(first, last - first + 1).colwise().mean().transpose();
}

using ScalarFn = std::function<double(const Vec64&)>;

// Central-difference gradient estimate; the verification oracle for every backward pass.
Vec64 finite_diff_grad(const ScalarFn& f, const Vec64& x, double eps = 1e-5);

struct GradCheck {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  Eigen::Index worst_index = -1;
  bool ok = true;
};

// Element-wise comparison: relative error where |g| >= abs_floor, absolute otherwise.
GradCheck compare_gradients(const Vec64& analytic, const Vec64& numeric, double rel_tol = 1e-4,
                            double abs_floor = 1e-8);

}  // namespace spanforge
