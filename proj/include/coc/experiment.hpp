#pragma once

#include <iosfwd>
#include <string>

#include "coc/report.hpp"

namespace coc {

// Generates the SIM/REAL training sets and the REAL test split (with its
// rare-event quota) and writes them plus a manifest under out_dir.
void generate_experiment_data(const RunConfig& cfg, const std::string& out_dir,
                              std::ostream* log);

// Runs the configured stage end to end: training, checkpoint, curves and
// plots, then evaluation on the REAL test split. Artifacts land in
// cfg.out_dir.
MetricsReport run_experiment(const RunConfig& cfg, const WarmStart& warm = {},
                             std::ostream* log = nullptr);

struct AblationOptions {
  int n_seeds = 3;
  bool quick = false;  // smoke-test sizes
  std::string out_dir = "runs/ablation";
};

struct AblationOutcome {
  bool ordering_holds = false;  // majority over seeds
  int seeds_with_ordering = 0;
  nlohmann::json table;
};

// The four-row comparison (real-only / mix / finetune-twice / adversarial)
// over n_seeds seeds, evaluated on the rare-event and normal test subsets.
// The adversarial row must win on the rare split for the outcome to hold.
AblationOutcome reproduce_ablation(RunConfig base, const AblationOptions& opt,
                                   std::ostream* log = nullptr);

// ordering predicate for one seed's four stage evaluations
bool transfer_ordering_holds(const EvalSplits& adversarial,
                             const EvalSplits& real_only,
                             const EvalSplits& mix,
                             const EvalSplits& finetune_twice);

}  // namespace coc
