#pragma once

#include <vector>

#include "elm/tinyformer.hpp"

namespace elm::nn {

/// Linear warmup to `peak` over the first `warmup_fraction` of steps, then linear decay to zero.
class LinearSchedule {
public:
    LinearSchedule(double peak, int total_steps, double warmup_fraction = 0.1);
    double at(int step) const;

private:
    double peak_;
    int total_;
    int warmup_;
};

/// Adam with bias correction; state is keyed by position in the parameter list.
class Adam {
public:
    explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads, double lr);

private:
    double beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<Matrix> m_, v_;
};

/// Flat pointer lists over an EncoderParams, in visit order.
std::vector<Matrix*> tensor_list(EncoderParams& p);
std::vector<const Matrix*> tensor_list(const EncoderParams& p);

}  // namespace elm::nn
