#pragma once

// Decoupled-weight-decay Adam and checkpoint serialization.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ovcos/errors.hpp"
#include "ovcos/nn.hpp"

namespace ovcos::optim {

struct AdamWConfig {
    double lr = 3e-6;
    double weight_decay = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class AdamW {
public:
    AdamW(nn::ParameterStore& store, AdamWConfig cfg) : store_(&store), cfg_(cfg)
    {
        for (const auto& [name, var] : store.entries()) {
            m_[name] = Matrix::Zero(var.rows(), var.cols());
            v_[name] = Matrix::Zero(var.rows(), var.cols());
        }
    }

    const AdamWConfig& config() const { return cfg_; }
    std::int64_t step_count() const { return step_; }

    /// One update from the accumulated gradients, each scaled by `grad_scale`.
    /// Parameters without a gradient only receive weight decay.
    void step(double grad_scale = 1.0)
    {
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (const auto& [name, handle] : store_->entries()) {
            ag::Var var = handle;
            Matrix& p = var.mutable_value();
            Matrix& m = m_.at(name);
            Matrix& v = v_.at(name);
            p *= 1.0 - cfg_.lr * cfg_.weight_decay;
            if (var.has_grad()) {
                const Matrix g = var.grad() * grad_scale;
                if (!g.allFinite()) throw NumericalFault("AdamW: non-finite gradient for '" + name + "'");
                m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
                v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
            } else {
                m *= cfg_.beta1;
                v *= cfg_.beta2;
            }
            p.array() -= cfg_.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg_.eps);
        }
    }

    nlohmann::json state() const
    {
        nlohmann::json j;
        j["step"] = step_;
        for (const auto& [name, m] : m_) j["m"][name] = std::vector<double>(m.data(), m.data() + m.size());
        for (const auto& [name, v] : v_) j["v"][name] = std::vector<double>(v.data(), v.data() + v.size());
        return j;
    }

    void load_state(const nlohmann::json& j)
    {
        step_ = j.at("step").get<std::int64_t>();
        for (auto& [name, m] : m_) fill(m, j.at("m").at(name), name);
        for (auto& [name, v] : v_) fill(v, j.at("v").at(name), name);
    }

private:
    static void fill(Matrix& dst, const nlohmann::json& src, const std::string& name)
    {
        const auto vals = src.get<std::vector<double>>();
        if (vals.size() != static_cast<std::size_t>(dst.size()))
            throw InvalidInput("optimizer state for '" + name + "' has the wrong size");
        std::copy(vals.begin(), vals.end(), dst.data());
    }

    nn::ParameterStore* store_;
    AdamWConfig cfg_;
    std::map<std::string, Matrix> m_;
    std::map<std::string, Matrix> v_;
    std::int64_t step_ = 0;
};

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
    int format_version = kCheckpointVersion;
    nlohmann::json config;
    std::map<std::string, Matrix> params;
    nlohmann::json optimizer;
    int epoch = 0;
    std::int64_t step = 0;
};

inline Checkpoint capture(const nn::ParameterStore& store, const nlohmann::json& config, const AdamW* opt, int epoch,
                          std::int64_t step)
{
    Checkpoint c;
    c.config = config;
    for (const auto& [name, var] : store.entries()) c.params[name] = var.value();
    if (opt) c.optimizer = opt->state();
    c.epoch = epoch;
    c.step = step;
    return c;
}

/// Binary CBOR encoding of the JSON checkpoint document (doubles round-trip exactly).
inline void save_checkpoint(const std::string& path, const Checkpoint& c)
{
    nlohmann::json j;
    j["format_version"] = c.format_version;
    j["config"] = c.config;
    j["epoch"] = c.epoch;
    j["step"] = c.step;
    for (const auto& [name, m] : c.params)
        j["params"][name] = {{"rows", m.rows()}, {"cols", m.cols()},
                             {"data", std::vector<double>(m.data(), m.data() + m.size())}};
    if (!c.optimizer.is_null()) j["optimizer"] = c.optimizer;
    const auto bytes = nlohmann::json::to_cbor(j);
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot write checkpoint '" + tmp + "'");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed for checkpoint '" + tmp + "' (disk full?)");
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    nlohmann::json j;
    try {
        j = nlohmann::json::from_cbor(bytes);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("corrupt checkpoint '" + path + "': " + e.what());
    }
    Checkpoint c;
    c.format_version = j.at("format_version").get<int>();
    if (c.format_version != kCheckpointVersion)
        throw InvalidInput("checkpoint '" + path + "' has format version " + std::to_string(c.format_version) +
                           ", expected " + std::to_string(kCheckpointVersion));
    c.config = j.at("config");
    c.epoch = j.at("epoch").get<int>();
    c.step = j.at("step").get<std::int64_t>();
    for (const auto& [name, p] : j.at("params").items()) {
        Matrix m(p.at("rows").get<Eigen::Index>(), p.at("cols").get<Eigen::Index>());
        const auto vals = p.at("data").get<std::vector<double>>();
        if (vals.size() != static_cast<std::size_t>(m.size()))
            throw InvalidInput("checkpoint parameter '" + name + "' has inconsistent size");
        std::copy(vals.begin(), vals.end(), m.data());
        c.params[name] = std::move(m);
    }
    if (j.contains("optimizer")) c.optimizer = j.at("optimizer");
    return c;
}

/// Copies checkpoint values into a store with identical names and shapes.
inline void restore(nn::ParameterStore& store, const Checkpoint& c)
{
    std::vector<std::string> problems;
    for (const auto& [name, var] : store.entries()) {
        auto it = c.params.find(name);
        if (it == c.params.end()) {
            problems.push_back("missing '" + name + "'");
            continue;
        }
        if (it->second.rows() != var.rows() || it->second.cols() != var.cols()) {
            problems.push_back("shape of '" + name + "'");
            continue;
        }
    }
    if (c.params.size() != store.entries().size()) problems.push_back("parameter count differs");
    if (!problems.empty()) {
        std::string msg = "checkpoint does not match the decoder:";
        for (const auto& p : problems) msg += " " + p + ";";
        throw InvalidInput(msg);
    }
    for (const auto& [name, handle] : store.entries()) {
        ag::Var var = handle;
        var.mutable_value() = c.params.at(name);
    }
}

} // namespace ovcos::optim
