#pragma once

// Central finite-difference gradient checks against the reverse-mode engine.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ovcos/autograd.hpp"

namespace gradcheck {

using ovcos::Matrix;
namespace ag = ovcos::ag;

struct Result {
    double max_relative_error = 0.0; // over inputs, ||analytic - numeric|| / max(||analytic||, ||numeric||)
    std::string worst_input;
    double worst_analytic_norm = 0.0;
};

/// `inputs` are leaves with requires_grad; `fn` rebuilds the scalar from them.
inline Result check(std::vector<std::pair<std::string, ag::Var>> inputs, const std::function<ag::Var()>& fn,
                    double step = 1e-6, std::size_t max_entries = 400)
{
    for (auto& [_, v] : inputs) v.zero_grad();
    ag::Var out = fn();
    ag::backward(out);
    Result res;
    for (auto& [name, v] : inputs) {
        const Matrix analytic = v.has_grad() ? v.grad() : Matrix::Zero(v.rows(), v.cols());
        Matrix numeric = Matrix::Zero(v.rows(), v.cols());
        Matrix a_used = Matrix::Zero(v.rows(), v.cols());
        const Eigen::Index n = v.value().size();
        const Eigen::Index stride = std::max<Eigen::Index>(1, n / static_cast<Eigen::Index>(max_entries));
        for (Eigen::Index i = 0; i < n; i += stride) {
            double& x = v.mutable_value().data()[i];
            const double orig = x;
            x = orig + step;
            double fp;
            {
                ag::NoGradGuard g;
                fp = fn().item();
            }
            x = orig - step;
            double fm;
            {
                ag::NoGradGuard g;
                fm = fn().item();
            }
            x = orig;
            numeric.data()[i] = (fp - fm) / (2.0 * step);
            a_used.data()[i] = analytic.data()[i];
        }
        const double denom = std::max({a_used.norm(), numeric.norm(), 1e-12});
        const double rel = (a_used - numeric).norm() / denom;
        if (rel > res.max_relative_error) {
            res.max_relative_error = rel;
            res.worst_input = name;
            res.worst_analytic_norm = a_used.norm();
        }
    }
    return res;
}

inline Matrix random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0)
{
    std::normal_distribution<double> n(0.0, scale);
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

} // namespace gradcheck
