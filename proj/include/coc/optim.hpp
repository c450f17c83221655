#pragma once

#include <memory>
#include <string>
#include <vector>

#include "coc/binio.hpp"
#include "coc/tensor.hpp"

namespace coc {

// Updates parameters in registration order from their accumulated gradients.
// Parameters whose grad was never touched (e.g. gated off) are skipped.
// Gradients are not zeroed here; the caller does that explicitly per step.
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step() = 0;
  virtual const char* name() const = 0;
  virtual void save_state(ByteWriter& w) const = 0;
  virtual void load_state(ByteReader& r) = 0;
};

class Adam : public Optimizer {
 public:
  Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8);
  // per-parameter learning rates, for per-module schedules
  Adam(std::vector<Tensor> params, std::vector<double> lrs,
       double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step() override;
  const char* name() const override { return "adam"; }
  void save_state(ByteWriter& w) const override;
  void load_state(ByteReader& r) override;

  long long steps_taken() const { return t_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }

 private:
  std::vector<Tensor> params_;
  std::vector<double> lrs_;
  double beta1_, beta2_, eps_;
  long long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

class SgdMomentum : public Optimizer {
 public:
  SgdMomentum(std::vector<Tensor> params, double lr, double momentum = 0.9);
  void step() override;
  const char* name() const override { return "sgd-momentum"; }
  void save_state(ByteWriter& w) const override;
  void load_state(ByteReader& r) override;

  const std::vector<std::vector<double>>& velocities() const { return vel_; }

 private:
  std::vector<Tensor> params_;
  double lr_, momentum_;
  std::vector<std::vector<double>> vel_;
};

}  // namespace coc
