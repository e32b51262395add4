#pragma once

#include "mldip/baselines.hpp"
#include "mldip/core.hpp"
#include "mldip/eval.hpp"
#include "mldip/mldip.hpp"
#include "mldip/phantom.hpp"

#include <map>
#include <string>
#include <vector>

namespace mldip::harness {

// ---- experiment configuration ------------------------------------------------

struct AcquisitionConfig {
  int n_coils = 8;
  int n_readouts = 11;
  float noise_sigma = 0.01f;
};

struct GatingConfig {
  float frame_ms = 33.0f;
};

struct PreprocessConfig {
  int virtual_coils = 0;  // 0 disables coil compression
};

struct BaselinesConfig {
  bool zero_filled = true;
  bool fixed_template = false;
  bool binned = false;
  int n_card = 20;
  int n_resp = 4;
  float reject_threshold = 0.2f;
  float lambda_t = 0.05f;
  float lambda_s = 0.001f;
  int cs_iterations = 30;
};

struct EvalConfig {
  int window_start = 1;    // 1-based first evaluated frame
  int window_frames = 100; // clamped to the series length
};

/// Full experiment description. Every field has a default; the plain-text
/// config file may override any of them and unknown keys are rejected.
struct ExperimentConfig {
  phantom::PhantomConfig phantom;
  AcquisitionConfig acquisition;
  GatingConfig gating;
  PreprocessConfig preprocess;
  model::ModelConfig model;
  BaselinesConfig baselines;
  EvalConfig eval;
  std::string output_dir = "mldip-out";
  std::uint32_t seed = 1;

  void validate() const;  // throws ConfigError

  static ExperimentConfig desk_default();
  static ExperimentConfig paper_scale();
};

/// Parses the INI-style config text ("[section]" headers, "key = value"
/// lines, '#' comments). A top-level "preset = desk-default|paper-scale" key
/// selects the baseline the remaining keys override. Unknown sections, keys,
/// or malformed values throw ConfigError.
ExperimentConfig parse_config(const std::string &text);
ExperimentConfig load_config(const std::string &path);

/// Full config in the file format; parse_config(config_echo(c)) reproduces c.
std::string config_echo(const ExperimentConfig &cfg);

// ---- orchestration -------------------------------------------------------------

struct RunResult {
  std::string output_dir;
  bool ok = false;
  std::string failed_stage;  // empty on success
  std::string error;         // empty on success
  std::map<std::string, double> metrics;
};

/// Runs phantom -> simulate -> gate -> preprocess -> train (+ requested
/// baselines) -> infer evaluation window -> eval, writing all artifacts and a
/// sha256 manifest into cfg.output_dir (prefixed by $MLDIP_OUTPUT_ROOT when
/// set). Stage failures are reported in the result and in a stage-labeled
/// error report on disk; partial outputs are preserved. The directory is
/// guarded by a lock file for the duration of the run.
RunResult run_experiment(const ExperimentConfig &cfg);

struct SweepRow {
  int frames = 0;
  bool ok = false;
  double psnr = 0;
  double ssim = 0;
  std::string error;
};

/// One truncated-series run per entry of t_list (train on the first T frames);
/// per-T failures are recorded and the sweep continues. Emits sweep.tsv under
/// cfg.output_dir alongside the per-T run directories.
std::vector<SweepRow> sweep_scan_time(const ExperimentConfig &cfg, const std::vector<int> &t_list);

}  // namespace mldip::harness
