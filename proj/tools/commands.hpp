#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dynq/tensorcore/errors.hpp"
#include "run_config.hpp"

namespace dynq::cli {

namespace fs = std::filesystem;

/// Bad invocation or unusable inputs; maps to exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Pretrained decoder for the config's decoder and pretrain sections, cached
/// under cache_root/decoders/<digest>/decoder.bin.
fs::path ensure_decoder(const RunConfig& config, const fs::path& cache_root, std::ostream* progress = nullptr);

/// Writes the corpus and returns the summary (counts, centroid distances,
/// manifest digests).
nlohmann::json cmd_gen_data(const RunConfig& config, const fs::path& out_dir);

struct TrainOutcome {
  fs::path run_dir;
  fs::path checkpoint;
  bool cached = false;
  std::vector<nlohmann::json> log;
};

/// Trains into runs_root/train-<digest>. A finished run with the same
/// resolved config is reused, never overwritten.
TrainOutcome cmd_train(const RunConfig& config, const fs::path& data_dir, const fs::path& runs_root,
                       const std::optional<fs::path>& decoder = std::nullopt, std::ostream* progress = nullptr);

struct EvalOutcome {
  train::EvalReport report;
  std::vector<train::Prediction> predictions;
  nlohmann::json efficiency;
  fs::path out_dir;
};

/// Writes predictions.jsonl, metrics.json, metrics.csv, efficiency.json and
/// efficiency.csv into out_dir.
EvalOutcome cmd_eval(const fs::path& checkpoint, const fs::path& manifest, corpus::Task task,
                     const fs::path& out_dir);

/// {dynamic, linear} x {all dialects, A, B, C}; writes ablation.json and
/// ablation.csv into out_root.
nlohmann::json cmd_ablate(const RunConfig& config, const fs::path& data_dir, const fs::path& out_root,
                          std::ostream* progress = nullptr);

struct GradcheckOutcome {
  nlohmann::json report;
  bool passed = false;
};

/// Finite-difference checks of an enhancer layer, cross_attend, ctc_loss and
/// the joint objective with frozen selection.
GradcheckOutcome cmd_gradcheck(double tolerance = 1e-4);

/// Empirical category frequencies of sampler.draws draws over the train
/// manifest against the target probabilities.
nlohmann::json cmd_sample_stats(const RunConfig& config, const fs::path& data_dir);

/// Entry point: 0 success, 1 internal failure, 2 usage or config error.
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace dynq::cli
