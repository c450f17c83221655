#include "coc/vlm.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace coc {

const char* to_string(Role r) { return r == Role::TEACHER ? "TEACHER" : "STUDENT"; }

void VlmConfig::validate() const {
  brain.validate();
  if (view_h % patch != 0 || view_w % patch != 0)
    throw config_error("view size must be divisible by the patch size");
  if (input_window < 3 + kMaxPromptTokens ||
      input_window < 3 + kMaxCachedTokens)
    throw config_error("input window too small for the prompt budget");
  if (total_seq(max_answer_tokens) > brain.max_seq)
    throw config_error("brain max_seq " + std::to_string(brain.max_seq) +
                       " cannot hold " +
                       std::to_string(total_seq(max_answer_tokens)) +
                       " positions");
}

std::string VlmConfig::arch_descriptor() const {
  std::ostringstream os;
  os << "cocvlm{" << brain.arch_descriptor() << ",views=" << kNumViews << "x"
     << view_c << "x" << view_h << "x" << view_w << ",patch=" << patch
     << ",input_window=" << input_window
     << ",max_answer=" << max_answer_tokens
     << ",feature_pool=" << int(feature_pool)
     << ",traj_pool=" << int(traj_pool)
     << ",adapters=" << (use_adapters ? adapter_rank : 0) << "}";
  return os.str();
}

CoCVLM CoCVLM::init(Role role, VlmConfig cfg, std::uint64_t seed) {
  const Vocabulary& v = Vocabulary::instance();
  if (cfg.brain.vocab_size < v.size())
    throw config_error("brain vocab_size " +
                       std::to_string(cfg.brain.vocab_size) +
                       " smaller than the vocabulary (" +
                       std::to_string(v.size()) + ")");
  cfg.validate();
  CoCVLM m;
  m.role = role;
  m.cfg = cfg;
  m.seed = seed;
  m.vocab_hash = v.version_hash();
  TransformerConfig bc = cfg.brain;
  bc.seed = seed;
  m.brain = Transformer::init(bc, m.store, "brain");
  Rng rng(seed ^ 0xc0c0c0c0ull);
  m.vision_proj = Linear::init(cfg.patch_dim(), cfg.brain.d_model, rng,
                               m.store, "vision_proj");
  m.traj_head = Linear::init(cfg.brain.d_model, 12, rng, m.store, "traj_head");
  if (cfg.use_adapters) {
    Rng arng(seed ^ 0xada7ada7ull);
    attach_adapters(m.brain, cfg.adapter_rank, cfg.adapter_scaling, arng,
                    m.store);
  }
  return m;
}

std::vector<Tensor> CoCVLM::finetune_params() const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : store.items()) {
    if (name.rfind("adapter.", 0) == 0 || name.rfind("traj_head", 0) == 0 ||
        name.rfind("brain.lm_head", 0) == 0)
      out.push_back(t);
  }
  return out;
}

Tensor vision_encode(const CoCVLM& m,
                     const std::vector<const std::vector<float>*>& views) {
  const VlmConfig& cfg = m.cfg;
  const int B = int(views.size());
  if (B == 0) throw contract_error("vision_encode on an empty batch");
  const int P = cfg.patch;
  const int ph = cfg.view_h / P, pw = cfg.view_w / P;
  const int tokens_per_view = ph * pw;
  const int n_tokens = kNumViews * tokens_per_view;
  const int pdim = cfg.patch_dim();

  const std::size_t expected = std::size_t(kNumViews) * cfg.view_c *
                               cfg.view_h * cfg.view_w;
  std::vector<double> patches(std::size_t(B) * n_tokens * pdim);
  for (int b = 0; b < B; ++b) {
    if (!views[std::size_t(b)] || views[std::size_t(b)]->size() != expected)
      throw contract_error("vision_encode: expected 6 views of " +
                           std::to_string(cfg.view_c) + "x" +
                           std::to_string(cfg.view_h) + "x" +
                           std::to_string(cfg.view_w));
    const auto& raster = *views[std::size_t(b)];
    for (int v = 0; v < kNumViews; ++v)
      for (int py = 0; py < ph; ++py)
        for (int px = 0; px < pw; ++px) {
          const int tok = (v * ph + py) * pw + px;
          double* dst =
              patches.data() +
              (std::size_t(b) * n_tokens + std::size_t(tok)) * pdim;
          int k = 0;
          for (int c = 0; c < cfg.view_c; ++c)
            for (int dy = 0; dy < P; ++dy)
              for (int dx = 0; dx < P; ++dx) {
                const int h = py * P + dy, w = px * P + dx;
                dst[k++] = double(raster[std::size_t(
                    ((v * cfg.view_c + c) * cfg.view_h + h) * cfg.view_w +
                    w)]);
              }
        }
  }
  Tensor patch_tensor =
      Tensor::from({B, n_tokens, pdim}, std::move(patches));
  return m.vision_proj.forward(patch_tensor);
}

namespace {

// [B, 1, S] row weights that average the chosen positions
Tensor pool_weights(int B, int S, const std::vector<std::pair<int, int>>& spans) {
  std::vector<double> w(std::size_t(B) * S, 0.0);
  for (int b = 0; b < B; ++b) {
    const auto& [start, len] = spans[std::size_t(b)];
    const double inv = 1.0 / double(len);
    for (int i = 0; i < len; ++i)
      w[std::size_t(b) * S + std::size_t(start + i)] = inv;
  }
  return Tensor::from({B, 1, S}, std::move(w));
}

}  // namespace

ForwardResult model_forward(const CoCVLM& m,
                            const std::vector<ModelInput>& batch) {
  if (batch.empty()) throw contract_error("model_forward on an empty batch");
  const Vocabulary& voc = Vocabulary::instance();
  const VlmConfig& cfg = m.cfg;
  const int B = int(batch.size());
  const int n_vis = cfg.visual_tokens();
  const int W = cfg.input_window;

  int La = 0;
  std::vector<int> answer_lens(static_cast<std::size_t>(B), 0);
  for (int b = 0; b < B; ++b) {
    const auto& in = batch[std::size_t(b)];
    if (int(in.prompt_tokens.size()) > W)
      throw shape_error("assembled prompt longer than the input window");
    answer_lens[std::size_t(b)] = int(in.answer_tokens.size());
    La = std::max(La, answer_lens[std::size_t(b)]);
  }
  if (La > cfg.max_answer_tokens)
    throw shape_error("answer length " + std::to_string(La) +
                      " exceeds the configured ceiling " +
                      std::to_string(cfg.max_answer_tokens));

  const int S = n_vis + W + La;
  if (S > cfg.brain.max_seq)
    throw shape_error("sequence length " + std::to_string(S) +
                      " exceeds max_seq");

  // text ids: padded prompt window then padded answers
  std::vector<int> ids;
  ids.reserve(std::size_t(B) * (W + La));
  for (int b = 0; b < B; ++b) {
    const auto& in = batch[std::size_t(b)];
    for (int t : in.prompt_tokens) ids.push_back(t);
    for (int i = int(in.prompt_tokens.size()); i < W; ++i)
      ids.push_back(voc.pad());
    for (int t : in.answer_tokens) ids.push_back(t);
    for (int i = answer_lens[std::size_t(b)]; i < La; ++i)
      ids.push_back(voc.pad());
  }
  for (int id : ids)
    if (id < 0 || id >= cfg.brain.vocab_size)
      throw vocab_error("token id " + std::to_string(id) +
                        " outside the model vocab");

  std::vector<const std::vector<float>*> views;
  views.reserve(std::size_t(B));
  for (const auto& in : batch) views.push_back(in.views);

  Tensor vis = vision_encode(m, views);                        // [B,n_vis,d]
  Tensor txt = embedding(m.brain.tok_emb, ids, {B, W + La});   // [B,W+La,d]
  Tensor seq = concat({vis, txt}, 1);                          // [B,S,d]
  Tensor hidden = m.brain.forward_embedded(seq);

  ForwardResult fr;
  fr.answer_len = La;
  fr.answer_lens = answer_lens;

  if (La > 0) {
    // answer token j is predicted from the hidden state one position back
    Tensor pred_h = slice(hidden, 1, n_vis + W - 1, La);
    fr.answer_logits = m.brain.logits_of(pred_h);  // [B,La,V]
  }
  {
    Tensor last_h = slice(hidden, 1, S - 1, 1);
    fr.next_logits =
        reshape(m.brain.logits_of(last_h), {B, cfg.brain.vocab_size});
  }

  // pooled feature row (discriminator) and trajectory input
  auto spans_for = [&](PoolPoint p) {
    std::vector<std::pair<int, int>> spans(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b) {
      if (p == PoolPoint::AnswerPositions && answer_lens[std::size_t(b)] > 0)
        spans[std::size_t(b)] = {n_vis + W, answer_lens[std::size_t(b)]};
      else
        spans[std::size_t(b)] = {
            0, n_vis + int(batch[std::size_t(b)].prompt_tokens.size())};
    }
    return spans;
  };
  Tensor feat_w = pool_weights(B, S, spans_for(cfg.feature_pool));
  fr.features = reshape(matmul(feat_w, hidden), {B, cfg.brain.d_model});
  Tensor traj_w = pool_weights(B, S, spans_for(cfg.traj_pool));
  Tensor traj_in = reshape(matmul(traj_w, hidden), {B, cfg.brain.d_model});
  fr.traj = m.traj_head.forward(traj_in);
  return fr;
}

Tensor vlm_loss(const ForwardResult& fr, const std::vector<ModelInput>& batch,
                const Tensor& gt_traj, double lambda) {
  if (lambda < 0.0) throw config_error("lambda must be nonnegative");
  if (!fr.answer_logits.defined())
    throw contract_error("vlm_loss needs teacher-forced answer logits");
  const int B = int(batch.size());
  const int La = fr.answer_len;
  // flat targets; padded positions carry weight 0
  std::vector<int> targets(std::size_t(B) * La, 0);
  std::vector<double> mask(std::size_t(B) * La, 0.0);
  double total = 0.0;
  for (int b = 0; b < B; ++b) {
    const auto& ans = batch[std::size_t(b)].answer_tokens;
    for (int j = 0; j < int(ans.size()); ++j) {
      targets[std::size_t(b) * La + std::size_t(j)] = ans[std::size_t(j)];
      mask[std::size_t(b) * La + std::size_t(j)] = 1.0;
      total += 1.0;
    }
  }
  if (total == 0.0) throw contract_error("vlm_loss with empty answers");
  Tensor ce = cross_entropy_with_logits(fr.answer_logits, targets);  // [B,La]
  Tensor masked = mul(ce, Tensor::from({B, La}, std::move(mask)));
  Tensor ce_mean = scale(sum(masked), 1.0 / total);
  // mean squared waypoint error in m^2 (dx^2+dy^2 per waypoint) equals twice
  // the per-coordinate mse
  Tensor traj_term = scale(mse(fr.traj, gt_traj), 2.0);
  return add(ce_mean, scale(traj_term, lambda));
}

Tensor traj_targets(const std::vector<const Frame*>& frames) {
  std::vector<double> t;
  t.reserve(frames.size() * 12);
  for (const Frame* f : frames)
    for (const auto& [x, y] : f->gt_trajectory) {
      t.push_back(x);
      t.push_back(y);
    }
  return Tensor::from({int(frames.size()), 12}, std::move(t));
}

std::vector<Generation> generate_batch(const CoCVLM& m,
                                       const std::vector<ModelInput>& batch,
                                       int max_len) {
  const Vocabulary& voc = Vocabulary::instance();
  if (max_len <= 0) max_len = m.cfg.max_answer_tokens;
  max_len = std::min(max_len, m.cfg.max_answer_tokens);
  const int B = int(batch.size());

  std::vector<ModelInput> work = batch;
  for (auto& w : work) w.answer_tokens.clear();
  std::vector<bool> done(static_cast<std::size_t>(B), false);
  std::vector<std::vector<int>> out(static_cast<std::size_t>(B));
  std::vector<Generation> gens(static_cast<std::size_t>(B));

  // the trajectory head reads input positions only, so one forward suffices
  {
    ForwardResult fr = model_forward(m, work);
    for (int b = 0; b < B; ++b) {
      Waypoints wp;
      for (int k = 0; k < 6; ++k)
        wp[std::size_t(k)] = {
            fr.traj.values()[std::size_t(b) * 12 + std::size_t(2 * k)],
            fr.traj.values()[std::size_t(b) * 12 + std::size_t(2 * k + 1)]};
      gens[std::size_t(b)].traj = wp;
      gens[std::size_t(b)].traj_valid = true;
    }
  }

  for (int step = 0; step < max_len; ++step) {
    bool all_done = true;
    for (bool d : done) all_done = all_done && d;
    if (all_done) break;
    ForwardResult fr = model_forward(m, work);
    const int V = m.cfg.brain.vocab_size;
    // every row holds exactly `step` answer tokens, so the final context
    // position predicts token `step` for all rows at once
    for (int b = 0; b < B; ++b) {
      if (done[std::size_t(b)]) {
        work[std::size_t(b)].answer_tokens.push_back(voc.pad());
        continue;
      }
      const double* row =
          fr.next_logits.values().data() + std::size_t(b) * V;
      int best = 0;
      for (int i = 1; i < V; ++i)
        if (row[i] > row[best]) best = i;
      if (best == voc.eos()) {
        done[std::size_t(b)] = true;
        work[std::size_t(b)].answer_tokens.push_back(voc.pad());
      } else {
        out[std::size_t(b)].push_back(best);
        work[std::size_t(b)].answer_tokens.push_back(best);
      }
    }
  }

  for (int b = 0; b < B; ++b) {
    gens[std::size_t(b)].tokens = out[std::size_t(b)];
    gens[std::size_t(b)].parse = parse_answer_tokens(out[std::size_t(b)], voc);
  }
  return gens;
}

Generation generate_answer(const CoCVLM& m, const ModelInput& input,
                           int max_len) {
  return generate_batch(m, {input}, max_len)[0];
}

ModelInput make_model_input(const Clip& clip, int frame_idx,
                            const Vocabulary& v, bool with_answer) {
  if (frame_idx < 0 || frame_idx >= int(clip.frames.size()))
    throw contract_error("frame index out of range");
  const Frame& f = clip.frames[std::size_t(frame_idx)];
  ModelInput in;
  in.views = &f.views;
  std::optional<CachedInstruction> cached;
  if (frame_idx > 0)
    cached = filter_answer(clip.frames[std::size_t(frame_idx) - 1].gt_answer,
                           frame_idx - 1);
  in.prompt_tokens =
      assemble_prompt(cached, PromptSet::instance().default_prompt(), v);
  if (with_answer) {
    in.answer_tokens = tokenize(render_answer(f.gt_answer), v);
    in.answer_tokens.push_back(v.eos());
  }
  return in;
}

}  // namespace coc
