#pragma once

#include <optional>
#include <string>
#include <vector>

#include "coc/lang.hpp"
#include "coc/metrics.hpp"
#include "coc/nn.hpp"
#include "coc/sim.hpp"

namespace coc {

enum class Role : std::uint8_t { TEACHER, STUDENT };
const char* to_string(Role r);

// Where a pooled hidden vector is read from.
enum class PoolPoint : std::uint8_t {
  AnswerPositions,  // mean over teacher-forced answer positions
  InputPositions,   // mean over visual + real prompt positions
};

struct VlmConfig {
  TransformerConfig brain;  // vocab_size must cover the shipped vocabulary
  int view_c = kViewC, view_h = kViewH, view_w = kViewW;
  int patch = 4;
  int input_window = 52;        // BOS + cache(<=20) + SEP + prompt, padded
  int max_answer_tokens = 140;  // answer + EOS ceiling
  // discriminator features follow the answer positions; the trajectory head
  // reads the input positions so planning needs no decoding
  PoolPoint feature_pool = PoolPoint::AnswerPositions;
  PoolPoint traj_pool = PoolPoint::InputPositions;
  bool use_adapters = false;
  int adapter_rank = 8;
  double adapter_scaling = 1.0;

  int visual_tokens() const {
    return kNumViews * (view_h / patch) * (view_w / patch);
  }
  int patch_dim() const { return view_c * patch * patch; }
  int total_seq(int answer_len) const {
    return visual_tokens() + input_window + answer_len;
  }
  void validate() const;
  // architecture identity string; excludes seed and role
  std::string arch_descriptor() const;
};

// Feature rows handed to the discriminator, with provenance labels.
struct FeatureBatch {
  Tensor features;  // [batch, d_model]
  std::vector<Domain> domain_label;
  std::vector<Role> producer;

  int rows() const { return features.defined() ? features.dim(0) : 0; }
};

// One frame prepared for the model.
struct ModelInput {
  const std::vector<float>* views = nullptr;  // 6 x C x H x W
  std::vector<int> prompt_tokens;             // assembled, unpadded
  std::vector<int> answer_tokens;             // gt answer + EOS; empty at inference
};

struct ForwardResult {
  Tensor answer_logits;  // [B, La, V]; undefined when no answers were given
  Tensor next_logits;    // [B, V] at the final context position
  Tensor traj;           // [B, 2*traj points]
  Tensor features;       // [B, d_model]
  int answer_len = 0;    // La
  std::vector<int> answer_lens;  // real per-row answer lengths
};

struct CoCVLM {
  Role role = Role::STUDENT;
  VlmConfig cfg;
  std::uint64_t seed = 0;
  std::uint64_t vocab_hash = 0;
  ParamStore store;
  Transformer brain;
  Linear vision_proj;  // patch_dim -> d_model
  Linear traj_head;    // d_model -> 12

  static CoCVLM init(Role role, VlmConfig cfg, std::uint64_t seed);

  std::vector<Tensor> params() const { return store.tensors(); }
  // adapters + heads only, for parameter-efficient fine-tuning
  std::vector<Tensor> finetune_params() const;
};

// Stacked six-view patch embedding: patch tokens -> linear projection into
// d_model. Token count = 6 * (H/P) * (W/P); no extrinsics are used.
Tensor vision_encode(const CoCVLM& m,
                     const std::vector<const std::vector<float>*>& views);

// Full forward over [visual || padded prompt || (answer)], causal decoding.
ForwardResult model_forward(const CoCVLM& m,
                            const std::vector<ModelInput>& batch);

// mean answer cross-entropy + lambda * mean squared waypoint error (m^2)
Tensor vlm_loss(const ForwardResult& fr, const std::vector<ModelInput>& batch,
                const Tensor& gt_traj, double lambda);

// flat [B, 12] trajectory tensor from frames
Tensor traj_targets(const std::vector<const Frame*>& frames);

struct Generation {
  std::vector<int> tokens;  // generated ids, EOS excluded
  ParseResult parse;
  Waypoints traj{};
  bool traj_valid = false;
};

// Greedy decoding until EOS or max_len; the parsed answer and the trajectory
// head output are both returned.
Generation generate_answer(const CoCVLM& m, const ModelInput& input,
                           int max_len = 0);
std::vector<Generation> generate_batch(const CoCVLM& m,
                                       const std::vector<ModelInput>& batch,
                                       int max_len = 0);

// teacher-forcing input for a clip frame: the cached instruction comes from
// the ground-truth filtered answer of the previous frame
ModelInput make_model_input(const Clip& clip, int frame_idx,
                            const Vocabulary& v, bool with_answer);

}  // namespace coc
