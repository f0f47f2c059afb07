#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "reclab/checkpoint_io.hpp"

namespace reclab {

/// One value per seed, or a single value for seed-independent quantities.
struct Metric {
  std::string name;
  std::vector<Real> values;
};

/// Ordering property judged on medians:
///   median(lhs) <relation> factor * median(rhs)
/// where rhs names a metric, or is the constant rhs_value when empty.
struct Property {
  std::string name;
  std::string lhs;
  std::string relation;  // "<", "<=", ">", ">="
  std::string rhs;
  Real rhs_value = 0;
  Real factor = 1;
  bool gating = true;
};

/// summary.json holds metrics and properties; wall-clock timings go to
/// timing.json so that re-runs reproduce summary.json bitwise.
struct RunSummary {
  std::string kind;
  std::string config_hash;
  std::vector<std::uint64_t> seeds;
  std::vector<Metric> metrics;
  std::vector<Metric> timings;
  std::vector<Property> properties;

  /// Searches metrics, then timings; nullptr when absent.
  const Metric* find(const std::string& name) const;
};

std::string summary_json(const RunSummary& s);
std::string timing_json(const RunSummary& s);
/// FormatError on malformed input. timing may be empty.
RunSummary parse_summary(const std::string& summary, const std::string& timing);

/// Shared state of a set of experiments: the suite, the pre-training lineage
/// and an on-disk cache of adaptation runs under <out>/store.
class Workspace {
 public:
  explicit Workspace(ExperimentConfig cfg, std::ostream* log = nullptr);

  const ExperimentConfig& config() const { return cfg_; }
  const Suite& suite() const { return suite_; }
  const ModelConfig& model() const { return cfg_.model; }
  std::string store_dir() const;
  void log(const std::string& line) const;

  /// Final parameters of "M0".."M<n_domains>" or "IND". Trains and stores
  /// the lineage on first use; complete runs are loaded from the store.
  const ParamVector& backbone(const std::string& id);
  /// Emitted checkpoints of one pre-training run, step 0 first:
  /// "main-D0" .. "main-D<n>" and "ind-D0".
  const std::vector<Checkpoint>& run(const std::string& run_id);
  std::vector<std::string> run_ids() const;
  /// Held-out windows of a domain for MLM dev loss.
  PretrainData dev_data(std::size_t domain) const;

  /// The task's fixed splits, with train reduced to kshot examples per label
  /// drawn with `seed` (kshot 0 keeps every example) and dev cut to dev_size.
  TaskDataset task(const std::string& task_id, std::uint64_t seed, std::size_t kshot) const;
  /// Full train-split inputs without labels.
  std::vector<Example> unlabeled(const std::string& task_id) const;
  /// Index of the domain a task is drawn from.
  std::size_t task_domain(const std::string& task_id) const;

  struct Run {
    AdaptedWeights delta;
    std::vector<CurvePoint> curve;
    std::size_t best_step = 0;
    Real best_dev_accuracy = 0;
  };

  /// Memoized on disk under `key`, which must identify every input of
  /// `produce` beyond the workspace config.
  const Run& cached(const std::string& key, const std::function<AdaptResult()>& produce);
  /// Supervised adaptation of a backbone with the workspace settings.
  const Run& adapted(const std::string& backbone_id, const std::string& task_id, Method method, std::uint64_t seed,
                     std::size_t kshot = 0);

 private:
  void train_run(const std::string& run_id);
  std::string run_path(const std::string& run_id, std::size_t step) const;
  std::size_t run_steps(const std::string& run_id) const;

  ExperimentConfig cfg_;
  std::ostream* log_;
  Suite suite_;
  std::string env_hash_;
  std::string lineage_hash_;
  std::map<std::string, std::vector<Checkpoint>> runs_;
  std::map<std::string, ParamVector> finals_;
  std::map<std::string, Run> memo_;
};

/// Runs one experiment kind into <out>/<kind>. Artifacts are staged in
/// <out>/<kind>.incomplete and renamed into place when the run finishes, so
/// an interrupted run leaves only the marked staging directory.
RunSummary run_experiment(Workspace& ws, ExperimentKind kind);
RunSummary run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr);

}  // namespace reclab
