#pragma once

#include <string>
#include <vector>

#include "coc/nn.hpp"
#include "coc/vlm.hpp"

namespace coc {

// Critic over pooled VLM features: input projection, a small stack of
// residual MLP blocks, one logit per row.
struct Discriminator {
  int input_dim = 0, d_disc = 64;
  ParamStore store;
  Linear input_proj;
  struct Block {
    LayerNormParams ln;
    Linear fc1, fc2;
  };
  std::vector<Block> blocks;
  LayerNormParams final_ln;
  Linear logit_head;

  static Discriminator init(int input_dim, int d_disc, int n_blocks,
                            std::uint64_t seed);
  std::vector<Tensor> params() const { return store.tensors(); }
};

// Linear sim-to-real feature map, identity when disabled (the default).
struct AlignmentMap {
  bool enabled = false;
  Tensor matrix;  // [d, d]
  Tensor bias;    // [d]

  static AlignmentMap disabled_map() { return AlignmentMap{}; }
  static AlignmentMap identity(int d);
  std::vector<Tensor> params() const;
};

// One logit per feature row; teacher-produced (sim-side) rows pass through
// the alignment map when it is enabled.
Tensor disc_forward(const Discriminator& d, const FeatureBatch& fb,
                    const AlignmentMap& t = AlignmentMap::disabled_map());

// Binary logistic loss (SIM -> 1, REAL -> 0), mean over rows, each
// per-sample term clamped at rho. This instantiates the convex generator as
// the Jensen-Shannon one (up to the ln 2 shift). Pre-clamp per-sample values
// are written to per_sample when given.
Tensor disc_loss(const Tensor& logits, const std::vector<Domain>& labels,
                 double rho = 30.0, std::vector<double>* per_sample = nullptr);

struct DiscrepancyEstimate {
  double value = 0.0;  // nats, clamped below at 0
  int n_samples = 0;
  std::string bound_kind = "lower-bound";
  std::string convex_generator = "jensen-shannon";
  double critic_eval_loss = 0.0;
  bool critic_trained = true;  // false flags an untrained-critic estimate
};

// Variational JS lower bound read off a trained critic: ln 2 - loss.
DiscrepancyEstimate estimate_discrepancy(const Discriminator& d,
                                         const FeatureBatch& fb_sim,
                                         const FeatureBatch& fb_real,
                                         const AlignmentMap& t =
                                             AlignmentMap::disabled_map(),
                                         double rho = 30.0);

struct EstimateConfig {
  int steps = 300;
  int batch = 128;
  double lr = 0.01;
  int d_disc = 64;
  int n_blocks = 2;
  double rho = 30.0;
  std::uint64_t seed = 1;
};

// Trains a fresh critic on half the rows and evaluates the bound on the
// held-out half; rho must stay above the observed per-sample losses for the
// lower-bound property to survive the clamp.
DiscrepancyEstimate train_and_estimate(
    const std::vector<std::vector<double>>& sim_rows,
    const std::vector<std::vector<double>>& real_rows,
    const EstimateConfig& cfg = {});

// [rows, d] feature tensor + labels helper
FeatureBatch make_feature_batch(const std::vector<std::vector<double>>& rows,
                                Domain domain, Role producer);

}  // namespace coc
