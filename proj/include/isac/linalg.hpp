#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <numbers>

namespace isac {

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

inline constexpr double kSpeedOfLight = 2.998e8;
inline constexpr double kPi = std::numbers::pi;

/// Maps an angle to (-pi, pi].
inline double wrap_angle(double a)
{
    double w = std::remainder(a, 2.0 * kPi);
    if (w <= -kPi) {
        w += 2.0 * kPi;
    }
    return w;
}

template <typename Derived>
auto symmetrized(const Eigen::MatrixBase<Derived>& m)
{
    return (0.5 * (m + m.transpose())).eval();
}

template <typename Derived>
double min_eigenvalue(const Eigen::MatrixBase<Derived>& m)
{
    using Matrix = typename Derived::PlainObject;
    Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrized(m), Eigen::EigenvaluesOnly);
    return eig.eigenvalues().minCoeff();
}

/// Symmetric square root of a PSD matrix; tiny negative eigenvalues from
/// round-off are clamped to zero.
template <typename Derived>
typename Derived::PlainObject psd_sqrt(const Eigen::MatrixBase<Derived>& m)
{
    using Matrix = typename Derived::PlainObject;
    Eigen::SelfAdjointEigenSolver<Matrix> eig(symmetrized(m));
    const auto vals = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().eval();
    return eig.eigenvectors() * vals.asDiagonal() * eig.eigenvectors().transpose();
}

inline double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }
inline double dbm_to_watts(double dbm) { return 1e-3 * db_to_linear(dbm); }

} // namespace isac
