#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "ovcos/errors.hpp"
#include "ovcos/vlm_bridge.hpp"

namespace ovcos::prompts {

inline constexpr const char* kPlaceholder = "<class>";

class PromptTemplateSet {
public:
    PromptTemplateSet(std::string name, std::vector<std::string> templates)
        : name_(std::move(name)), templates_(std::move(templates))
    {
        require(!templates_.empty(), "PromptTemplateSet '" + name_ + "': at least one template is required");
        for (const auto& t : templates_) {
            const auto first = t.find(kPlaceholder);
            require(first != std::string::npos,
                    "PromptTemplateSet '" + name_ + "': template \"" + t + "\" has no <class> placeholder");
            require(t.find(kPlaceholder, first + 1) == std::string::npos,
                    "PromptTemplateSet '" + name_ + "': template \"" + t + "\" has more than one <class> placeholder");
        }
    }

    const std::string& name() const { return name_; }
    const std::vector<std::string>& templates() const { return templates_; }
    std::size_t size() const { return templates_.size(); }

private:
    std::string name_;
    std::vector<std::string> templates_;
};

/// The six distinct camouflage-aware templates.
inline PromptTemplateSet camo_prompts()
{
    return PromptTemplateSet("camo", {
                                         "A photo of the camouflaged <class>.",
                                         "A photo of the concealed <class>.",
                                         "A photo of the <class> camouflaged in the background.",
                                         "A photo of the <class> concealed in the background.",
                                         "A photo of the <class> camouflaged to blend in with its surroundings.",
                                         "A photo of the <class> concealed to blend in with its surroundings.",
                                     });
}

inline PromptTemplateSet photo_prompt() { return PromptTemplateSet("photo", {"A photo of the <class>."}); }
inline PromptTemplateSet bare_prompt() { return PromptTemplateSet("bare", {"<class>"}); }

inline std::vector<std::string> builtin_set_names() { return {"camo", "photo", "bare"}; }

inline PromptTemplateSet builtin_set(const std::string& name)
{
    if (name == "camo") return camo_prompts();
    if (name == "photo") return photo_prompt();
    if (name == "bare") return bare_prompt();
    throw InvalidInput("unknown built-in template set '" + name + "'");
}

/// One template per line; blank lines and lines starting with '#' are skipped.
inline PromptTemplateSet load_template_file(const std::string& path, std::string name = {})
{
    std::ifstream in(path);
    if (!in) throw IoError("cannot open template file '" + path + "'");
    std::vector<std::string> templates;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto b = line.find_first_not_of(" \t");
        if (b == std::string::npos || line[b] == '#') continue;
        const auto e = line.find_last_not_of(" \t");
        templates.push_back(line.substr(b, e - b + 1));
    }
    return PromptTemplateSet(name.empty() ? path : std::move(name), std::move(templates));
}

/// Built-in name or path to a template file.
inline PromptTemplateSet resolve_template_set(const std::string& name_or_path)
{
    for (const auto& n : builtin_set_names())
        if (n == name_or_path) return builtin_set(n);
    return load_template_file(name_or_path);
}

inline std::vector<std::string> expand(const PromptTemplateSet& set, const std::string& class_name)
{
    require(!class_name.empty(), "expand: class name is empty");
    std::vector<std::string> out;
    out.reserve(set.size());
    for (const auto& t : set.templates()) {
        std::string s = t;
        s.replace(s.find(kPlaceholder), std::string(kPlaceholder).size(), class_name);
        out.push_back(std::move(s));
    }
    return out;
}

/// Mean of the per-template embeddings, renormalized to unit length.
inline vlm::ClassEmbeddingSet class_embeddings(const vlm::Backbone& backbone, const PromptTemplateSet& set,
                                               const std::vector<std::string>& class_names)
{
    require(!class_names.empty(), "class_embeddings: class list is empty");
    std::set<std::string> unique;
    for (const auto& c : class_names)
        require(unique.insert(c).second, "class_embeddings: duplicate class name '" + c + "'");

    std::vector<std::string> all;
    all.reserve(class_names.size() * set.size());
    for (const auto& c : class_names) {
        auto e = expand(set, c);
        all.insert(all.end(), e.begin(), e.end());
    }
    const vlm::TextEncoding enc = backbone.encode_text(all);

    vlm::ClassEmbeddingSet out;
    out.class_names = class_names;
    out.embeddings.resize(static_cast<Eigen::Index>(class_names.size()), enc.embeddings.cols());
    const auto n = static_cast<Eigen::Index>(set.size());
    for (Eigen::Index c = 0; c < static_cast<Eigen::Index>(class_names.size()); ++c) {
        Matrix mean = enc.embeddings.middleRows(c * n, n).colwise().sum() / static_cast<double>(n);
        const double norm = mean.norm();
        out.embeddings.row(c) = norm > 0.0 ? Matrix(mean / norm) : mean;
    }
    return out;
}

// ---------------------------------------------------------------- set distances

inline void check_point_sets(const Matrix& a, const Matrix& b)
{
    require(a.rows() > 0 && b.rows() > 0, "hausdorff: point sets must be non-empty");
    require(a.cols() == b.cols(), "hausdorff: dimension mismatch (" + std::to_string(a.cols()) + " vs " +
                                      std::to_string(b.cols()) + ")");
}

/// sup_{x in a} inf_{y in b} ||x - y||.
inline double directed_hausdorff(const Matrix& a, const Matrix& b)
{
    check_point_sets(a, b);
    double worst = 0.0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < b.rows() && best > worst; ++j)
            best = std::min(best, (a.row(i) - b.row(j)).norm());
        worst = std::max(worst, best);
    }
    return worst;
}

inline double hausdorff_distance(const Matrix& a, const Matrix& b)
{
    return std::max(directed_hausdorff(a, b), directed_hausdorff(b, a));
}

} // namespace ovcos::prompts
