#pragma once
// Test-only helpers: central finite-difference gradient checking.

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "elm/optimizer.hpp"
#include "elm/rng.hpp"
#include "elm/tinyformer.hpp"

namespace elm::test {

inline void perturb(nn::EncoderParams& p, double stddev, std::uint64_t seed) {
    Rng rng(seed);
    p.visit([&](const std::string&, nn::Matrix& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += stddev * rng.normal();
    });
}

struct NamedTensor {
    std::string name;
    nn::Matrix* value;
    const nn::Matrix* grad;
};

struct GradCheckReport {
    int checked = 0;
    double max_rel_error = 0.0;
    std::string worst;
    int groups_covered = 0;
};

/// Picks a tensor uniformly, then an element uniformly, `samples` times and
/// compares (L(x+eps) - L(x-eps)) / 2eps with the analytic gradient using
/// |fd - g| / (|g| + 1e-8).
inline GradCheckReport check_gradients(const std::vector<NamedTensor>& tensors, const std::function<double()>& loss,
                                       int samples, double eps, std::uint64_t seed) {
    Rng rng(seed);
    GradCheckReport report;
    std::set<std::string> groups;
    for (int s = 0; s < samples; ++s) {
        const auto& t = tensors[rng.below(tensors.size())];
        const auto idx = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(t.value->size())));
        double& x = t.value->data()[idx];
        const double saved = x;
        x = saved + eps;
        const double up = loss();
        x = saved - eps;
        const double down = loss();
        x = saved;
        const double fd = (up - down) / (2.0 * eps);
        const double analytic = t.grad->data()[idx];
        const double rel = std::abs(fd - analytic) / (std::abs(analytic) + 1e-8);
        if (rel > report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst = t.name + "[" + std::to_string(idx) + "] fd=" + std::to_string(fd) +
                           " analytic=" + std::to_string(analytic);
        }
        const auto dot = t.name.find('.');
        const std::string leaf = dot == std::string::npos ? t.name : t.name.substr(dot + 1);
        groups.insert(leaf);
        ++report.checked;
    }
    report.groups_covered = static_cast<int>(groups.size());
    return report;
}

inline std::vector<NamedTensor> encoder_tensors(nn::EncoderParams& params, const nn::EncoderParams& grads,
                                                const std::string& prefix = "") {
    std::vector<NamedTensor> out;
    std::vector<const nn::Matrix*> g = nn::tensor_list(grads);
    std::size_t i = 0;
    params.visit([&](const std::string& name, nn::Matrix& m) { out.push_back({prefix + name, &m, g[i++]}); });
    return out;
}

inline GradCheckReport check_encoder_gradients(nn::Encoder& model, const nn::EncoderParams& grads,
                                               const std::function<double(const nn::Encoder&)>& loss, int samples,
                                               double eps, std::uint64_t seed) {
    return check_gradients(encoder_tensors(model.params, grads), [&] { return loss(model); }, samples, eps, seed);
}

/// A random linear functional of every recorded activation, which exercises
/// both upstream gradient entry points of backward().
struct ActivationProbe {
    nn::ActivationGrads grads;

    static ActivationProbe random(const nn::Encoder& model, const nn::Batch& batch, std::uint64_t seed) {
        Rng rng(seed);
        const auto cache = nn::forward(model, batch);
        ActivationProbe probe{nn::ActivationGrads::empty(cache.layers.size())};
        auto fill = [&](nn::Matrix m) {
            for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
            return m;
        };
        for (std::size_t l = 0; l < cache.layers.size(); ++l) {
            probe.grads.hidden[l] = fill(cache.activations(l).hidden);
            for (const auto& a : cache.activations(l).attention_scores) {
                probe.grads.attention_scores[l].push_back(fill(a));
            }
        }
        return probe;
    }

    double value(const nn::ForwardCache& cache) const {
        double v = 0.0;
        for (std::size_t l = 0; l < cache.layers.size(); ++l) {
            v += cache.activations(l).hidden.cwiseProduct(grads.hidden[l]).sum();
            for (std::size_t i = 0; i < grads.attention_scores[l].size(); ++i) {
                v += cache.activations(l).attention_scores[i].cwiseProduct(grads.attention_scores[l][i]).sum();
            }
        }
        return v;
    }
};

}  // namespace elm::test
