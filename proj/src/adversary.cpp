#include "coc/adversary.hpp"

#include <algorithm>
#include <cmath>

#include "coc/optim.hpp"

namespace coc {

Discriminator Discriminator::init(int input_dim, int d_disc, int n_blocks,
                                  std::uint64_t seed) {
  if (input_dim <= 0 || d_disc <= 0 || n_blocks < 0)
    throw config_error("discriminator dims must be positive");
  Discriminator d;
  d.input_dim = input_dim;
  d.d_disc = d_disc;
  Rng rng(seed);
  d.input_proj = Linear::init(input_dim, d_disc, rng, d.store, "disc.in");
  for (int i = 0; i < n_blocks; ++i) {
    Block b;
    const std::string p = "disc.block" + std::to_string(i);
    b.ln = LayerNormParams::init(d_disc, d.store, p + ".ln");
    b.fc1 = Linear::init(d_disc, 2 * d_disc, rng, d.store, p + ".fc1");
    b.fc2 = Linear::init(2 * d_disc, d_disc, rng, d.store, p + ".fc2");
    d.blocks.push_back(std::move(b));
  }
  d.final_ln = LayerNormParams::init(d_disc, d.store, "disc.final_ln");
  d.logit_head = Linear::init(d_disc, 1, rng, d.store, "disc.head");
  return d;
}

AlignmentMap AlignmentMap::identity(int d) {
  AlignmentMap m;
  m.enabled = true;
  std::vector<double> eye(std::size_t(d) * d, 0.0);
  for (int i = 0; i < d; ++i) eye[std::size_t(i) * d + std::size_t(i)] = 1.0;
  m.matrix = Tensor::param({d, d}, std::move(eye));
  m.bias = Tensor::param({d}, std::vector<double>(std::size_t(d), 0.0));
  return m;
}

std::vector<Tensor> AlignmentMap::params() const {
  if (!enabled) return {};
  return {matrix, bias};
}

Tensor disc_forward(const Discriminator& d, const FeatureBatch& fb,
                    const AlignmentMap& t) {
  if (!fb.features.defined() || fb.rows() == 0)
    throw contract_error("disc_forward on an empty feature batch");
  if (fb.features.dim(1) != d.input_dim)
    throw shape_error("feature dim " + std::to_string(fb.features.dim(1)) +
                      " does not match discriminator input " +
                      std::to_string(d.input_dim));
  const int B = fb.rows();
  if (int(fb.producer.size()) != B || int(fb.domain_label.size()) != B)
    throw contract_error("feature batch labels out of step with rows");

  Tensor x = fb.features;
  if (t.enabled) {
    // teacher-produced rows go through the sim-to-real map
    const int dm = fb.features.dim(1);
    Tensor aligned = add(matmul(x, t.matrix), t.bias);
    std::vector<double> sel(std::size_t(B) * dm, 0.0);
    std::vector<double> inv(std::size_t(B) * dm, 1.0);
    for (int b = 0; b < B; ++b)
      if (fb.producer[std::size_t(b)] == Role::TEACHER)
        for (int j = 0; j < dm; ++j) {
          sel[std::size_t(b) * dm + std::size_t(j)] = 1.0;
          inv[std::size_t(b) * dm + std::size_t(j)] = 0.0;
        }
    x = add(mul(aligned, Tensor::from({B, dm}, std::move(sel))),
            mul(x, Tensor::from({B, dm}, std::move(inv))));
  }

  Tensor h = d.input_proj.forward(x);
  for (const auto& b : d.blocks) {
    Tensor z = b.fc2.forward(gelu(b.fc1.forward(b.ln.forward(h))));
    h = add(h, z);
  }
  h = d.final_ln.forward(h);
  return reshape(d.logit_head.forward(h), {B});
}

Tensor disc_loss(const Tensor& logits, const std::vector<Domain>& labels,
                 double rho, std::vector<double>* per_sample) {
  const int B = logits.dim(0);
  if (logits.size() != std::size_t(B))
    throw shape_error("disc_loss expects one logit per row");
  if (int(labels.size()) != B)
    throw shape_error("disc_loss labels/logits length mismatch");

  // two-class framing: column 0 carries the logit (SIM side), column 1 zero;
  // cross-entropy then equals the stable logistic loss
  Tensor z = reshape(logits, {B, 1});
  Tensor two = concat({z, Tensor::zeros({B, 1})}, 1);
  std::vector<int> targets(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b)
    targets[std::size_t(b)] = labels[std::size_t(b)] == Domain::SIM ? 0 : 1;
  Tensor per = cross_entropy_with_logits(two, targets);  // [B]
  // per-sample bound: min(l, rho) = rho - relu(rho - l)
  Tensor rho_t = Tensor::full({B}, rho);
  Tensor clamped =
      add(rho_t, scale(relu(add(rho_t, scale(per, -1.0))), -1.0));
  if (per_sample) *per_sample = clamped.values();
  return mean(clamped);
}

DiscrepancyEstimate estimate_discrepancy(const Discriminator& d,
                                         const FeatureBatch& fb_sim,
                                         const FeatureBatch& fb_real,
                                         const AlignmentMap& t, double rho) {
  if (fb_sim.rows() == 0 || fb_real.rows() == 0)
    throw contract_error("estimate_discrepancy needs nonempty batches");
  FeatureBatch joint;
  const int total = fb_sim.rows() + fb_real.rows();
  joint.features = concat({fb_sim.features, fb_real.features}, 0);
  joint.domain_label = fb_sim.domain_label;
  joint.domain_label.insert(joint.domain_label.end(),
                            fb_real.domain_label.begin(),
                            fb_real.domain_label.end());
  joint.producer = fb_sim.producer;
  joint.producer.insert(joint.producer.end(), fb_real.producer.begin(),
                        fb_real.producer.end());

  Tensor logits = disc_forward(d, joint, t);
  Tensor loss = disc_loss(logits, joint.domain_label, rho);
  DiscrepancyEstimate e;
  e.critic_eval_loss = loss.item();
  e.value = std::max(0.0, std::log(2.0) - e.critic_eval_loss);
  e.n_samples = total;
  // a critic at chance level signals it was never trained against this data
  e.critic_trained = e.critic_eval_loss < std::log(2.0) - 1e-3;
  return e;
}

FeatureBatch make_feature_batch(const std::vector<std::vector<double>>& rows,
                                Domain domain, Role producer) {
  if (rows.empty()) throw contract_error("empty feature rows");
  const int d = int(rows[0].size());
  std::vector<double> flat;
  flat.reserve(rows.size() * std::size_t(d));
  for (const auto& r : rows) {
    if (int(r.size()) != d) throw shape_error("ragged feature rows");
    flat.insert(flat.end(), r.begin(), r.end());
  }
  FeatureBatch fb;
  fb.features = Tensor::from({int(rows.size()), d}, std::move(flat));
  fb.domain_label.assign(rows.size(), domain);
  fb.producer.assign(rows.size(), producer);
  return fb;
}

DiscrepancyEstimate train_and_estimate(
    const std::vector<std::vector<double>>& sim_rows,
    const std::vector<std::vector<double>>& real_rows,
    const EstimateConfig& cfg) {
  if (sim_rows.size() < 4 || real_rows.size() < 4)
    throw contract_error("too few rows to split for estimation");
  const int d = int(sim_rows[0].size());

  // deterministic shuffle, then a 50/50 train/eval split per side
  Rng rng(cfg.seed);
  auto split = [&](const std::vector<std::vector<double>>& rows,
                   std::vector<std::vector<double>>& train,
                   std::vector<std::vector<double>>& eval_rows) {
    std::vector<std::size_t> idx(rows.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = idx.size(); i > 1; --i)
      std::swap(idx[i - 1], idx[std::size_t(rng.below(i))]);
    const std::size_t half = rows.size() / 2;
    for (std::size_t i = 0; i < rows.size(); ++i)
      (i < half ? train : eval_rows).push_back(rows[idx[i]]);
  };
  std::vector<std::vector<double>> sim_train, sim_eval, real_train, real_eval;
  split(sim_rows, sim_train, sim_eval);
  split(real_rows, real_train, real_eval);

  Discriminator critic =
      Discriminator::init(d, cfg.d_disc, cfg.n_blocks, cfg.seed ^ 0xd15cull);
  auto params = critic.params();
  Adam opt(params, cfg.lr);

  const int half_batch = std::max(1, cfg.batch / 2);
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<std::vector<double>> rows;
    std::vector<Domain> labels;
    for (int i = 0; i < half_batch; ++i) {
      rows.push_back(sim_train[std::size_t(rng.below(sim_train.size()))]);
      labels.push_back(Domain::SIM);
    }
    for (int i = 0; i < half_batch; ++i) {
      rows.push_back(real_train[std::size_t(rng.below(real_train.size()))]);
      labels.push_back(Domain::REAL);
    }
    FeatureBatch fb = make_feature_batch(rows, Domain::SIM, Role::TEACHER);
    fb.domain_label = labels;

    Tape tape;
    Tensor logits = disc_forward(critic, fb);
    std::vector<double> per;
    Tensor loss = disc_loss(logits, labels, cfg.rho, &per);
    for (double v : per)
      if (v > cfg.rho + 1e-9)
        throw numeric_error("per-sample loss escaped the configured bound");
    backward(loss);  // clamped contributions asserted above every step
    opt.step();
    zero_grads(params);
  }

  FeatureBatch fs = make_feature_batch(sim_eval, Domain::SIM, Role::TEACHER);
  FeatureBatch fr = make_feature_batch(real_eval, Domain::REAL, Role::STUDENT);
  DiscrepancyEstimate e = estimate_discrepancy(critic, fs, fr,
                                               AlignmentMap::disabled_map(),
                                               cfg.rho);
  return e;
}

}  // namespace coc
