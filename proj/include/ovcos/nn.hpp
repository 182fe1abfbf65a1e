#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ovcos/autograd.hpp"

namespace ovcos::nn {

/// FNV-1a over raw bytes; stable across runs and platforms with the same endianness.
inline std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h = 1469598103934665603ull)
{
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 1469598103934665603ull)
{
    return fnv1a(s.data(), s.size(), h);
}

inline std::uint64_t hash_matrix(const Matrix& m, std::uint64_t h = 1469598103934665603ull)
{
    const Eigen::Index dims[2] = {m.rows(), m.cols()};
    h = fnv1a(dims, sizeof(dims), h);
    return fnv1a(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double), h);
}

inline Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng)
{
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
}

/// Ordered registry of named trainable tensors.
class ParameterStore {
public:
    ag::Var add(const std::string& name, Matrix init)
    {
        require(!index_.count(name), "ParameterStore: duplicate parameter '" + name + "'");
        index_[name] = entries_.size();
        entries_.emplace_back(name, ag::parameter(std::move(init)));
        return entries_.back().second;
    }

    const ag::Var& get(const std::string& name) const
    {
        auto it = index_.find(name);
        require(it != index_.end(), "ParameterStore: unknown parameter '" + name + "'");
        return entries_[it->second].second;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    const std::vector<std::pair<std::string, ag::Var>>& entries() const { return entries_; }

    std::size_t scalar_count() const
    {
        std::size_t n = 0;
        for (const auto& [name, var] : entries_) n += static_cast<std::size_t>(var.value().size());
        return n;
    }

    void zero_grad()
    {
        for (auto& [name, var] : entries_) var.zero_grad();
    }

    std::uint64_t hash() const
    {
        std::uint64_t h = 1469598103934665603ull;
        for (const auto& [name, var] : entries_) {
            h = fnv1a(name, h);
            h = hash_matrix(var.value(), h);
        }
        return h;
    }

private:
    std::vector<std::pair<std::string, ag::Var>> entries_;
    std::map<std::string, std::size_t> index_;
};

/// y = x W + b with W stored as (in x out).
struct Linear {
    ag::Var weight;
    ag::Var bias; // may be undefined

    static Linear create(ParameterStore& store, const std::string& name, Eigen::Index in, Eigen::Index out,
                         std::mt19937_64& rng, bool with_bias = true)
    {
        Linear l;
        l.weight = store.add(name + ".weight", gaussian(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng));
        if (with_bias) l.bias = store.add(name + ".bias", Matrix::Zero(1, out));
        return l;
    }

    ag::Var operator()(const ag::Var& x) const
    {
        ag::Var y = ag::matmul(x, weight);
        return bias.defined() ? ag::add_row(y, bias) : y;
    }
};

/// 3x3 same-padding convolution in token layout.
struct Conv3x3 {
    ag::Var weight; // (9*in x out)
    ag::Var bias;   // optional

    static Conv3x3 create(ParameterStore& store, const std::string& name, Eigen::Index in, Eigen::Index out,
                          std::mt19937_64& rng, bool with_bias = false)
    {
        Conv3x3 c;
        c.weight = store.add(name + ".weight", gaussian(9 * in, out, std::sqrt(2.0 / (9.0 * in)), rng));
        if (with_bias) c.bias = store.add(name + ".bias", Matrix::Zero(1, out));
        return c;
    }

    ag::Var operator()(const ag::Var& x, int h, int w) const
    {
        ag::Var y = ag::matmul(ag::im2col3x3(x, h, w), weight);
        return bias.defined() ? ag::add_row(y, bias) : y;
    }
};

struct LayerNorm {
    ag::Var gamma;
    ag::Var beta;

    static LayerNorm create(ParameterStore& store, const std::string& name, Eigen::Index width)
    {
        LayerNorm n;
        n.gamma = store.add(name + ".gamma", Matrix::Ones(1, width));
        n.beta = store.add(name + ".beta", Matrix::Zero(1, width));
        return n;
    }

    ag::Var operator()(const ag::Var& x) const { return ag::layer_norm(x, gamma, beta); }
};

} // namespace ovcos::nn
