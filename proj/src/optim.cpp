#include "coc/optim.hpp"

#include <cmath>

namespace coc {

Adam::Adam(std::vector<Tensor> params, double lr, double beta1, double beta2,
           double eps)
    : Adam(params, std::vector<double>(params.size(), lr), beta1, beta2, eps) {}

Adam::Adam(std::vector<Tensor> params, std::vector<double> lrs, double beta1,
           double beta2, double eps)
    : params_(std::move(params)), lrs_(std::move(lrs)), beta1_(beta1),
      beta2_(beta2), eps_(eps) {
  if (lrs_.size() != params_.size())
    throw contract_error("adam needs one learning rate per parameter");
  for (const auto& p : params_) {
    if (!p.is_param()) throw contract_error("optimizer over a non-parameter");
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, double(t_));
  const double bc2 = 1.0 - std::pow(beta2_, double(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) continue;
    const auto& g = params_[i].grad();
    auto& vals = params_[i].values();
    auto& m = m_[i];
    auto& v = v_[i];
    const double lr = lrs_[i];
    for (std::size_t j = 0; j < vals.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      vals[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
      if (!std::isfinite(vals[j]))
        throw numeric_error("adam produced a non-finite parameter");
    }
  }
}

void Adam::save_state(ByteWriter& w) const {
  w.u64(std::uint64_t(t_));
  w.f64s(lrs_);
  w.f64(beta1_);
  w.f64(beta2_);
  w.f64(eps_);
  w.u32(std::uint32_t(m_.size()));
  for (std::size_t i = 0; i < m_.size(); ++i) {
    w.f64s(m_[i]);
    w.f64s(v_[i]);
  }
}

void Adam::load_state(ByteReader& r) {
  t_ = (long long)r.u64();
  lrs_ = r.f64s();
  if (lrs_.size() != params_.size())
    throw io_error("adam lr table does not match parameters");
  beta1_ = r.f64();
  beta2_ = r.f64();
  eps_ = r.f64();
  const std::uint32_t n = r.u32();
  if (n != m_.size()) throw io_error("adam state does not match parameters");
  for (std::size_t i = 0; i < n; ++i) {
    m_[i] = r.f64s();
    v_[i] = r.f64s();
    if (m_[i].size() != params_[i].size() || v_[i].size() != params_[i].size())
      throw io_error("adam moment size mismatch");
  }
}

SgdMomentum::SgdMomentum(std::vector<Tensor> params, double lr,
                         double momentum)
    : params_(std::move(params)), lr_(lr), momentum_(momentum) {
  for (const auto& p : params_) {
    if (!p.is_param()) throw contract_error("optimizer over a non-parameter");
    vel_.emplace_back(p.size(), 0.0);
  }
}

void SgdMomentum::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) continue;
    const auto& g = params_[i].grad();
    auto& vals = params_[i].values();
    auto& v = vel_[i];
    for (std::size_t j = 0; j < vals.size(); ++j) {
      v[j] = momentum_ * v[j] + g[j];
      vals[j] -= lr_ * v[j];
      if (!std::isfinite(vals[j]))
        throw numeric_error("sgd produced a non-finite parameter");
    }
  }
}

void SgdMomentum::save_state(ByteWriter& w) const {
  w.f64(lr_);
  w.f64(momentum_);
  w.u32(std::uint32_t(vel_.size()));
  for (const auto& v : vel_) w.f64s(v);
}

void SgdMomentum::load_state(ByteReader& r) {
  lr_ = r.f64();
  momentum_ = r.f64();
  const std::uint32_t n = r.u32();
  if (n != vel_.size()) throw io_error("sgd state does not match parameters");
  for (std::size_t i = 0; i < n; ++i) {
    vel_[i] = r.f64s();
    if (vel_[i].size() != params_[i].size())
      throw io_error("sgd velocity size mismatch");
  }
}

}  // namespace coc
