#include "elm/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace elm::nn {

LinearSchedule::LinearSchedule(double peak, int total_steps, double warmup_fraction)
    : peak_(peak), total_(std::max(total_steps, 1)),
      warmup_(static_cast<int>(std::lround(warmup_fraction * std::max(total_steps, 1)))) {}

double LinearSchedule::at(int step) const {
    if (step < warmup_) return peak_ * static_cast<double>(step + 1) / static_cast<double>(warmup_);
    const int remaining = total_ - warmup_;
    if (remaining <= 0) return peak_;
    return peak_ * static_cast<double>(total_ - step) / static_cast<double>(remaining);
}

void Adam::step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads, double lr) {
    if (params.size() != grads.size()) throw std::invalid_argument("Adam: parameter/gradient count mismatch");
    if (m_.empty()) {
        for (const Matrix* p : params) {
            m_.push_back(Matrix::Zero(p->rows(), p->cols()));
            v_.push_back(Matrix::Zero(p->rows(), p->cols()));
        }
    }
    if (m_.size() != params.size()) throw std::invalid_argument("Adam: parameter list changed between steps");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Matrix& g = *grads[i];
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
        params[i]->array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
    }
}

std::vector<Matrix*> tensor_list(EncoderParams& p) {
    std::vector<Matrix*> out;
    p.visit([&](const std::string&, Matrix& m) { out.push_back(&m); });
    return out;
}

std::vector<const Matrix*> tensor_list(const EncoderParams& p) {
    std::vector<const Matrix*> out;
    const_cast<EncoderParams&>(p).visit([&](const std::string&, Matrix& m) { out.push_back(&m); });
    return out;
}

}  // namespace elm::nn
