#include "mldip/harness.hpp"

#include "mldip/gating.hpp"
#include "mldip/io.hpp"
#include "mldip/preprocess.hpp"
#include "mldip/render.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace fs = std::filesystem;

namespace mldip::harness {

// ---- presets / validation -----------------------------------------------------

ExperimentConfig ExperimentConfig::desk_default() {
  ExperimentConfig c;  // field defaults are the desk configuration
  c.model = model::ModelConfig::desk_default();
  return c;
}

ExperimentConfig ExperimentConfig::paper_scale() {
  ExperimentConfig c;
  c.phantom.grid = Grid{110, 112, 92};
  c.phantom.frames_per_base_cycle = 1790;
  c.phantom.repeat_factor = 5;  // 8950 frames total
  c.model = model::ModelConfig::paper_scale();
  return c;
}

void ExperimentConfig::validate() const {
  phantom::validate(phantom);
  model.validate();
  if (acquisition.n_coils < 1) throw ConfigError("acquisition.n_coils must be >= 1");
  if (acquisition.n_readouts < 1) throw ConfigError("acquisition.n_readouts must be >= 1");
  if (acquisition.noise_sigma < 0) throw ConfigError("acquisition.noise_sigma must be >= 0");
  if (gating.frame_ms <= 0) throw ConfigError("gating.frame_ms must be positive");
  if (preprocess.virtual_coils < 0) throw ConfigError("preprocess.virtual_coils must be >= 0");
  if (baselines.n_card < 1 || baselines.n_resp < 1)
    throw ConfigError("baselines bin counts must be >= 1");
  if (baselines.reject_threshold < 0) throw ConfigError("baselines.reject_threshold must be >= 0");
  if (baselines.lambda_t < 0 || baselines.lambda_s < 0)
    throw ConfigError("baselines regularization weights must be >= 0");
  if (baselines.cs_iterations < 1) throw ConfigError("baselines.cs_iterations must be >= 1");
  if (eval.window_start < 1) throw ConfigError("eval.window_start must be >= 1");
  if (eval.window_frames < 1) throw ConfigError("eval.window_frames must be >= 1");
  if (output_dir.empty()) throw ConfigError("output.dir must not be empty");
}

// ---- config file parsing --------------------------------------------------------

namespace {

int parse_int(const std::string &v) {
  std::size_t used = 0;
  int x = std::stoi(v, &used);
  if (used != v.size()) throw ConfigError("malformed integer '" + v + "'");
  return x;
}

float parse_float(const std::string &v) {
  std::size_t used = 0;
  float x = std::stof(v, &used);
  if (used != v.size()) throw ConfigError("malformed number '" + v + "'");
  return x;
}

bool parse_bool(const std::string &v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("malformed boolean '" + v + "' (use true/false)");
}

std::vector<int> parse_int_list(const std::string &v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_int(item));
  if (out.empty()) throw ConfigError("empty list");
  return out;
}

model::TrainMode parse_mode(const std::string &v) {
  if (v == "full") return model::TrainMode::Full;
  if (v == "fixed-template") return model::TrainMode::FixedTemplate;
  if (v == "manifold-only") return model::TrainMode::ManifoldOnly;
  throw ConfigError("unknown model.mode '" + v + "'");
}

const char *mode_name(model::TrainMode m) {
  switch (m) {
    case model::TrainMode::Full: return "full";
    case model::TrainMode::FixedTemplate: return "fixed-template";
    case model::TrainMode::ManifoldOnly: return "manifold-only";
  }
  return "full";
}

std::string trim(const std::string &s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

using Setter = std::function<void(ExperimentConfig &, const std::string &)>;

const std::map<std::string, Setter> &setters() {
  static const std::map<std::string, Setter> table = {
      {".seed", [](ExperimentConfig &c, const std::string &v) { c.seed = std::uint32_t(parse_int(v)); }},
      {"phantom.grid_n1", [](ExperimentConfig &c, const std::string &v) { c.phantom.grid.n1 = parse_int(v); }},
      {"phantom.grid_n2", [](ExperimentConfig &c, const std::string &v) { c.phantom.grid.n2 = parse_int(v); }},
      {"phantom.grid_n3", [](ExperimentConfig &c, const std::string &v) { c.phantom.grid.n3 = parse_int(v); }},
      {"phantom.voxel_size_mm", [](ExperimentConfig &c, const std::string &v) { c.phantom.voxel_size_mm = parse_float(v); }},
      {"phantom.frames_per_base_cycle", [](ExperimentConfig &c, const std::string &v) { c.phantom.frames_per_base_cycle = parse_int(v); }},
      {"phantom.n_resp_cycles", [](ExperimentConfig &c, const std::string &v) { c.phantom.n_resp_cycles = parse_int(v); }},
      {"phantom.n_cardiac_beats", [](ExperimentConfig &c, const std::string &v) { c.phantom.n_cardiac_beats = parse_int(v); }},
      {"phantom.pvc_per_resp_cycle", [](ExperimentConfig &c, const std::string &v) { c.phantom.pvc_per_resp_cycle = parse_int(v); }},
      {"phantom.repeat_factor", [](ExperimentConfig &c, const std::string &v) { c.phantom.repeat_factor = parse_int(v); }},
      {"phantom.contrast_drift_amplitude", [](ExperimentConfig &c, const std::string &v) { c.phantom.contrast_drift_amplitude = parse_float(v); }},
      {"phantom.pvc_duration_factor", [](ExperimentConfig &c, const std::string &v) { c.phantom.pvc_duration_factor = parse_float(v); }},
      {"phantom.pvc_contraction_factor", [](ExperimentConfig &c, const std::string &v) { c.phantom.pvc_contraction_factor = parse_float(v); }},
      {"phantom.compensatory_duration_factor", [](ExperimentConfig &c, const std::string &v) { c.phantom.compensatory_duration_factor = parse_float(v); }},
      {"acquisition.n_coils", [](ExperimentConfig &c, const std::string &v) { c.acquisition.n_coils = parse_int(v); }},
      {"acquisition.n_readouts", [](ExperimentConfig &c, const std::string &v) { c.acquisition.n_readouts = parse_int(v); }},
      {"acquisition.noise_sigma", [](ExperimentConfig &c, const std::string &v) { c.acquisition.noise_sigma = parse_float(v); }},
      {"gating.frame_ms", [](ExperimentConfig &c, const std::string &v) { c.gating.frame_ms = parse_float(v); }},
      {"preprocess.virtual_coils", [](ExperimentConfig &c, const std::string &v) { c.preprocess.virtual_coils = parse_int(v); }},
      {"model.mode", [](ExperimentConfig &c, const std::string &v) { c.model.mode = parse_mode(v); }},
      {"model.l1", [](ExperimentConfig &c, const std::string &v) { c.model.L1 = parse_int(v); }},
      {"model.l2", [](ExperimentConfig &c, const std::string &v) { c.model.L2 = parse_int(v); }},
      {"model.lambda_smooth", [](ExperimentConfig &c, const std::string &v) { c.model.lambda_smooth = parse_float(v); }},
      {"model.iterations", [](ExperimentConfig &c, const std::string &v) { c.model.iterations = parse_int(v); }},
      {"model.batch_frames", [](ExperimentConfig &c, const std::string &v) { c.model.batch_frames = parse_int(v); }},
      {"model.lr_initial", [](ExperimentConfig &c, const std::string &v) { c.model.lr_initial = parse_float(v); }},
      {"model.lr_final", [](ExperimentConfig &c, const std::string &v) { c.model.lr_final = parse_float(v); }},
      {"model.conv_decoder_channels", [](ExperimentConfig &c, const std::string &v) { c.model.conv_decoder_channels = parse_int_list(v); }},
      {"model.unet_channels", [](ExperimentConfig &c, const std::string &v) { c.model.unet_channels = parse_int_list(v); }},
      {"model.mlp_flow_widths", [](ExperimentConfig &c, const std::string &v) { c.model.mlp_flow_widths = parse_int_list(v); }},
      {"model.mlp_image_widths", [](ExperimentConfig &c, const std::string &v) { c.model.mlp_image_widths = parse_int_list(v); }},
      {"baselines.zero_filled", [](ExperimentConfig &c, const std::string &v) { c.baselines.zero_filled = parse_bool(v); }},
      {"baselines.fixed_template", [](ExperimentConfig &c, const std::string &v) { c.baselines.fixed_template = parse_bool(v); }},
      {"baselines.binned", [](ExperimentConfig &c, const std::string &v) { c.baselines.binned = parse_bool(v); }},
      {"baselines.n_card", [](ExperimentConfig &c, const std::string &v) { c.baselines.n_card = parse_int(v); }},
      {"baselines.n_resp", [](ExperimentConfig &c, const std::string &v) { c.baselines.n_resp = parse_int(v); }},
      {"baselines.reject_threshold", [](ExperimentConfig &c, const std::string &v) { c.baselines.reject_threshold = parse_float(v); }},
      {"baselines.lambda_t", [](ExperimentConfig &c, const std::string &v) { c.baselines.lambda_t = parse_float(v); }},
      {"baselines.lambda_s", [](ExperimentConfig &c, const std::string &v) { c.baselines.lambda_s = parse_float(v); }},
      {"baselines.cs_iterations", [](ExperimentConfig &c, const std::string &v) { c.baselines.cs_iterations = parse_int(v); }},
      {"eval.window_start", [](ExperimentConfig &c, const std::string &v) { c.eval.window_start = parse_int(v); }},
      {"eval.window_frames", [](ExperimentConfig &c, const std::string &v) { c.eval.window_frames = parse_int(v); }},
      {"output.dir", [](ExperimentConfig &c, const std::string &v) { c.output_dir = v; }},
  };
  return table;
}

}  // namespace

ExperimentConfig parse_config(const std::string &text) {
  // First pass: find the preset (the base the remaining keys override).
  std::string preset = "desk-default";
  std::vector<std::pair<std::string, std::string>> entries;  // (section.key, value)
  std::string section;
  std::istringstream in(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string line = trim(raw);
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = trim(line.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("config line " + std::to_string(lineno) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (section.empty() && key == "preset") {
      preset = value;
      continue;
    }
    entries.emplace_back(section + "." + key, value);
  }

  ExperimentConfig cfg;
  if (preset == "desk-default")
    cfg = ExperimentConfig::desk_default();
  else if (preset == "paper-scale")
    cfg = ExperimentConfig::paper_scale();
  else
    throw ConfigError("unknown preset '" + preset + "'");

  const auto &table = setters();
  for (const auto &[key, value] : entries) {
    const auto it = table.find(key);
    if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
    try {
      it->second(cfg, value);
    } catch (const ConfigError &e) {
      throw ConfigError(std::string("config key '") + key + "': " + e.what());
    } catch (const std::exception &e) {
      throw ConfigError(std::string("config key '") + key + "': malformed value '" + value + "'");
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::string &path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

namespace {

std::string join_list(const std::vector<int> &v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace

std::string config_echo(const ExperimentConfig &c) {
  std::ostringstream o;
  o << "seed = " << c.seed << "\n\n";
  o << "[phantom]\n";
  o << "grid_n1 = " << c.phantom.grid.n1 << "\n";
  o << "grid_n2 = " << c.phantom.grid.n2 << "\n";
  o << "grid_n3 = " << c.phantom.grid.n3 << "\n";
  char buf[64];
  auto put_f = [&](const char *key, float v) {
    std::snprintf(buf, sizeof buf, "%s = %.9g\n", key, double(v));
    o << buf;
  };
  put_f("voxel_size_mm", c.phantom.voxel_size_mm);
  o << "frames_per_base_cycle = " << c.phantom.frames_per_base_cycle << "\n";
  o << "n_resp_cycles = " << c.phantom.n_resp_cycles << "\n";
  o << "n_cardiac_beats = " << c.phantom.n_cardiac_beats << "\n";
  o << "pvc_per_resp_cycle = " << c.phantom.pvc_per_resp_cycle << "\n";
  o << "repeat_factor = " << c.phantom.repeat_factor << "\n";
  put_f("contrast_drift_amplitude", c.phantom.contrast_drift_amplitude);
  put_f("pvc_duration_factor", c.phantom.pvc_duration_factor);
  put_f("pvc_contraction_factor", c.phantom.pvc_contraction_factor);
  put_f("compensatory_duration_factor", c.phantom.compensatory_duration_factor);
  o << "\n[acquisition]\n";
  o << "n_coils = " << c.acquisition.n_coils << "\n";
  o << "n_readouts = " << c.acquisition.n_readouts << "\n";
  put_f("noise_sigma", c.acquisition.noise_sigma);
  o << "\n[gating]\n";
  put_f("frame_ms", c.gating.frame_ms);
  o << "\n[preprocess]\n";
  o << "virtual_coils = " << c.preprocess.virtual_coils << "\n";
  o << "\n[model]\n";
  o << "mode = " << mode_name(c.model.mode) << "\n";
  o << "l1 = " << c.model.L1 << "\n";
  o << "l2 = " << c.model.L2 << "\n";
  put_f("lambda_smooth", c.model.lambda_smooth);
  o << "iterations = " << c.model.iterations << "\n";
  o << "batch_frames = " << c.model.batch_frames << "\n";
  put_f("lr_initial", c.model.lr_initial);
  put_f("lr_final", c.model.lr_final);
  o << "conv_decoder_channels = " << join_list(c.model.conv_decoder_channels) << "\n";
  o << "unet_channels = " << join_list(c.model.unet_channels) << "\n";
  o << "mlp_flow_widths = " << join_list(c.model.mlp_flow_widths) << "\n";
  o << "mlp_image_widths = " << join_list(c.model.mlp_image_widths) << "\n";
  o << "\n[baselines]\n";
  o << "zero_filled = " << (c.baselines.zero_filled ? "true" : "false") << "\n";
  o << "fixed_template = " << (c.baselines.fixed_template ? "true" : "false") << "\n";
  o << "binned = " << (c.baselines.binned ? "true" : "false") << "\n";
  o << "n_card = " << c.baselines.n_card << "\n";
  o << "n_resp = " << c.baselines.n_resp << "\n";
  put_f("reject_threshold", c.baselines.reject_threshold);
  put_f("lambda_t", c.baselines.lambda_t);
  put_f("lambda_s", c.baselines.lambda_s);
  o << "cs_iterations = " << c.baselines.cs_iterations << "\n";
  o << "\n[eval]\n";
  o << "window_start = " << c.eval.window_start << "\n";
  o << "window_frames = " << c.eval.window_frames << "\n";
  o << "\n[output]\n";
  o << "dir = " << c.output_dir << "\n";
  return o.str();
}

// ---- pipeline --------------------------------------------------------------------

namespace {

std::string resolve_output_dir(const std::string &dir) {
  const char *root = std::getenv("MLDIP_OUTPUT_ROOT");
  if (root && *root) return (fs::path(root) / dir).string();
  return dir;
}

void write_text(const std::string &path, const std::string &text) {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot open " + path + " for writing");
  f << text;
  if (!f) throw FormatError("write failed for " + path);
}

ImageSeries slice_window(const ImageSeries &s, int first, int count) {
  ImageSeries out(s.grid, count);
  std::copy(s.frame(first), s.frame(first) + std::size_t(count) * s.grid.voxels(), out.data.begin());
  return out;
}

LabelSeries slice_window(const LabelSeries &s, int first, int count) {
  LabelSeries out(s.grid, count);
  std::copy(s.frame(first), s.frame(first) + std::size_t(count) * s.grid.voxels(), out.data.begin());
  return out;
}

double pearson(const std::vector<double> &a, const std::vector<double> &b) {
  const std::size_t n = a.size();
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= double(n);
  mb /= double(n);
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  if (va <= 0 || vb <= 0) return 0.0;
  return cov / std::sqrt(va * vb);
}

void truncate_schedule(phantom::MotionSchedule &s, int frames) {
  s.cardiac_phase.resize(std::size_t(frames));
  s.resp_phase.resize(std::size_t(frames));
  s.beat_index.resize(std::size_t(frames));
  s.beat_duration.resize(std::size_t(frames));
  s.is_pvc.resize(std::size_t(frames));
}

std::vector<float> to_float(const std::vector<double> &v) {
  std::vector<float> out(v.size(), 0.0f);
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = float(v[i]);
  return out;
}

/// Shared by run_experiment and sweep_scan_time; truncate <= 0 keeps the full
/// series.
RunResult run_pipeline(const ExperimentConfig &cfg0, int truncate) {
  ExperimentConfig cfg = cfg0;
  cfg.validate();

  RunResult res;
  const std::string dir = resolve_output_dir(cfg.output_dir);
  res.output_dir = dir;
  fs::create_directories(dir);
  auto artifact = [&](const char *name) { return (fs::path(dir) / name).string(); };

  // One process owns the experiment directory.
  const std::string lock = artifact("lock");
  if (fs::exists(lock)) {
    res.failed_stage = "lock";
    res.error = "output directory is locked by another run (" + lock + ")";
    return res;
  }
  write_text(lock, "locked\n");

  std::string stage = "config";
  try {
    write_text(artifact("config.txt"), config_echo(cfg));

    stage = "phantom";
    cfg.phantom.seed = cfg.seed;
    phantom::PhantomSeries ph = phantom::generate_phantom_series(cfg.phantom);
    if (truncate > 0) {
      if (truncate > ph.images.frames)
        throw ContractError("truncation beyond the simulated series length");
      ph.images = slice_window(ph.images, 0, truncate);
      ph.labels = slice_window(ph.labels, 0, truncate);
      truncate_schedule(ph.schedule, truncate);
    }
    const int T = ph.images.frames;
    io::write_dvs(ph.images, artifact("truth_images.dvs"));
    io::write_dvs(ph.labels, artifact("truth_labels.dvs"));
    phantom::write_schedule(ph.schedule, artifact("schedule.txt"));

    stage = "simulate";
    auto maps = acquisition::synthesize_coil_maps(ph.images.grid, cfg.acquisition.n_coils,
                                                  std::uint32_t(stream_seed(cfg.seed, 2)));
    auto pattern = acquisition::opra_pattern(T, cfg.acquisition.n_readouts, ph.images.grid.n2,
                                             ph.images.grid.n3, cfg.acquisition.n_readouts / 2,
                                             std::uint32_t(stream_seed(cfg.seed, 3)));
    auto ks = acquisition::simulate_acquisition(ph.images, maps, pattern,
                                                cfg.acquisition.noise_sigma,
                                                stream_seed(cfg.seed, 4));
    io::write_kss(ks, artifact("kspace.kss"));
    io::write_coil_maps(maps, artifact("coil_maps.dvs"));
    res.metrics["acceleration_rate"] = acquisition::acceleration_rate(pattern);

    stage = "gate";
    auto gmat = gating::extract_central_lines(ks, 1000.0f / cfg.gating.frame_ms);
    auto latent = gating::extract_motion_components(gmat);
    gating::write_latent(latent, artifact("latent.txt"));
    {
      std::vector<std::vector<float>> comps(6);
      for (int k = 0; k < 6; ++k) {
        comps[std::size_t(k)].resize(std::size_t(T));
        for (int t = 0; t < T; ++t) comps[std::size_t(k)][std::size_t(t)] = latent.at(t, k);
      }
      render::save_curves(comps, 48, artifact("gating_components.pgm"));
    }

    stage = "preprocess";
    if (cfg.preprocess.virtual_coils > 0 && cfg.preprocess.virtual_coils < ks.n_coils) {
      auto cc = preprocess::pca_coil_compress(ks, cfg.preprocess.virtual_coils);
      maps = preprocess::compress_coil_maps(maps, cc.matrix, cc.n_virtual);
      ks = std::move(cc.compressed);
      io::write_kss(ks, artifact("kspace_compressed.kss"));
      res.metrics["coil_compression_retained_energy"] = cc.retained_energy;
    }

    stage = "train";
    cfg.model.seed = cfg.seed;
    model::TrainedModel trained = model::train(ks, maps, latent, cfg.model);
    model::save_model(trained, artifact("model.mdl1"));
    {
      std::ostringstream o;
      o << "# iteration\tloss\tdata_consistency\tregularizer\n";
      for (std::size_t i = 0; i < trained.loss_trace.size(); ++i)
        o << i << "\t" << trained.loss_trace[i] << "\t" << trained.dc_trace[i] << "\t"
          << trained.reg_trace[i] << "\n";
      write_text(artifact("loss_trace.tsv"), o.str());
      render::save_curves({trained.loss_trace, trained.dc_trace, trained.reg_trace}, 64,
                          artifact("loss_trace.pgm"));
      res.metrics["train_final_loss"] = trained.loss_trace.back();
      res.metrics["train_final_dc"] = trained.dc_trace.back();
    }

    // Evaluation window (1-based, inclusive).
    const int w0 = std::min(cfg.eval.window_start, T);
    const int w1 = std::min(w0 + cfg.eval.window_frames - 1, T);
    const int wn = w1 - w0 + 1;
    res.metrics["eval_window_start"] = w0;
    res.metrics["eval_window_frames"] = wn;
    res.metrics["frames"] = T;

    stage = "infer";
    ImageSeries recon = model::infer(trained, w0, w1);
    io::write_dvs(recon, artifact("recon_mldip.dvs"));

    stage = "baseline";
    ImageSeries zf;
    if (cfg.baselines.zero_filled) {
      ImageSeries zf_full = baselines::zero_filled_recon(ks, maps);
      zf = slice_window(zf_full, w0 - 1, wn);
      io::write_dvs(zf, artifact("recon_zero_filled.dvs"));
    }
    ImageSeries ft_recon;
    if (cfg.baselines.fixed_template) {
      model::ModelConfig ft_cfg = cfg.model;
      model::TrainedModel ft = baselines::fixed_template_train(ks, maps, latent, ft_cfg);
      model::save_model(ft, artifact("model_fixed_template.mdl1"));
      ft_recon = model::infer(ft, w0, w1);
      io::write_dvs(ft_recon, artifact("recon_fixed_template.dvs"));
      res.metrics["fixed_template_final_dc"] = ft.dc_trace.back();
    }
    if (cfg.baselines.binned) {
      baselines::BinAssignment bins =
          baselines::bin_frames(ph.schedule, cfg.baselines.n_card, cfg.baselines.n_resp,
                                cfg.baselines.reject_threshold);
      baselines::write_bin_table(bins, artifact("bin_table.tsv"));
      baselines::BinnedRecon br =
          baselines::binned_cs_recon(ks, maps, bins, cfg.baselines.lambda_t,
                                     cfg.baselines.lambda_s, cfg.baselines.cs_iterations);
      ImageSeries bs(br.grid, br.n_card * br.n_resp);
      std::copy(br.volumes.begin(), br.volumes.end(), bs.data.begin());
      io::write_dvs(bs, artifact("recon_binned.dvs"));
      int empty = 0;
      for (bool f : br.filled_from_neighbor) empty += f ? 1 : 0;
      res.metrics["binned_empty_bins"] = empty;
    }

    stage = "eval";
    ImageSeries truth_w = slice_window(ph.images, w0 - 1, wn);
    LabelSeries labels_w = slice_window(ph.labels, w0 - 1, wn);
    res.metrics["psnr_mldip"] = eval::psnr(truth_w, recon);
    res.metrics["ssim_mldip"] = eval::ssim(truth_w, recon);
    if (cfg.baselines.zero_filled) {
      res.metrics["psnr_zero_filled"] = eval::psnr(truth_w, zf);
      res.metrics["ssim_zero_filled"] = eval::ssim(truth_w, zf);
    }
    if (cfg.baselines.fixed_template) {
      res.metrics["psnr_fixed_template"] = eval::psnr(truth_w, ft_recon);
      res.metrics["ssim_fixed_template"] = eval::ssim(truth_w, ft_recon);
    }

    // x-t profiles through the heart center.
    const eval::LineSpec line{0, ph.images.grid.n2 / 2, ph.images.grid.n3 / 2};
    render::save_xt_profile(eval::xt_profile(truth_w, line), artifact("xt_truth.pgm"));
    render::save_xt_profile(eval::xt_profile(recon, line), artifact("xt_mldip.pgm"));
    if (cfg.baselines.zero_filled)
      render::save_xt_profile(eval::xt_profile(zf, line), artifact("xt_zero_filled.pgm"));
    render::save_montage(truth_w, 8, artifact("montage_truth.pgm"));
    render::save_montage(recon, 8, artifact("montage_mldip.pgm"));

    // Volume curves and per-beat function metrics.
    {
      phantom::PhantomSeries window_truth;
      window_truth.images = truth_w;
      window_truth.labels = labels_w;
      window_truth.voxel_size_mm = cfg.phantom.voxel_size_mm;
      std::vector<double> truth_curve = phantom::truth_volume_curve(window_truth);
      std::vector<double> recon_curve =
          eval::volume_curve(recon, labels_w, cfg.phantom.voxel_size_mm);
      {
        std::ostringstream o;
        o << "# frame\ttruth_ml\tmldip_ml\n";
        for (int t = 0; t < wn; ++t)
          o << (w0 + t) << "\t" << truth_curve[std::size_t(t)] << "\t"
            << recon_curve[std::size_t(t)] << "\n";
        write_text(artifact("volume_curves.tsv"), o.str());
        render::save_curves({to_float(truth_curve), to_float(recon_curve)}, 64,
                            artifact("volume_curves.pgm"));
      }

      // Complete beats inside the window, in window coordinates.
      std::vector<int> bounds;
      std::vector<bool> beat_is_pvc;
      for (int b : ph.schedule.beat_boundaries())
        if (b >= w0 - 1 && b <= w1) bounds.push_back(b - (w0 - 1));
      for (std::size_t i = 0; i + 1 < bounds.size(); ++i)
        beat_is_pvc.push_back(ph.schedule.is_pvc[std::size_t(bounds[i] + (w0 - 1))]);
      if (bounds.size() >= 2) {
        auto truth_ef = eval::ef_metrics(truth_curve, bounds);
        auto recon_ef = eval::ef_metrics(recon_curve, bounds);
        double mad = 0;
        int valid = 0;
        double corr_min = 1.0, corr_min_pvc = 1.0;
        bool any_pvc = false;
        std::ostringstream o;
        o << "# beat\ttruth_ef\tmldip_ef\tcorrelation\tis_pvc\n";
        for (std::size_t i = 0; i < truth_ef.size(); ++i) {
          const int b0 = bounds[i], b1 = bounds[i + 1];
          std::vector<double> ta(truth_curve.begin() + b0, truth_curve.begin() + b1);
          std::vector<double> ra(recon_curve.begin() + b0, recon_curve.begin() + b1);
          const double corr = pearson(ta, ra);
          corr_min = std::min(corr_min, corr);
          if (beat_is_pvc[i]) {
            any_pvc = true;
            corr_min_pvc = std::min(corr_min_pvc, corr);
          }
          if (truth_ef[i].valid && recon_ef[i].valid) {
            mad += std::abs(truth_ef[i].ef - recon_ef[i].ef);
            ++valid;
          }
          o << i << "\t" << truth_ef[i].ef << "\t" << recon_ef[i].ef << "\t" << corr << "\t"
            << int(beat_is_pvc[i]) << "\n";
        }
        write_text(artifact("ef_per_beat.tsv"), o.str());
        if (valid > 0) res.metrics["ef_mad"] = mad / double(valid);
        res.metrics["volcurve_corr_min"] = corr_min;
        if (any_pvc) res.metrics["volcurve_corr_min_pvc"] = corr_min_pvc;
      }
    }

    {
      std::ostringstream o;
      o << "# metric\tvalue\n";
      for (const auto &[k, v] : res.metrics) o << k << "\t" << v << "\n";
      write_text(artifact("metrics.tsv"), o.str());
    }

    stage = "manifest";
    {
      std::vector<std::string> names;
      for (const auto &e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (name == "lock" || name == "manifest.tsv") continue;
        names.push_back(name);
      }
      std::sort(names.begin(), names.end());
      std::ostringstream o;
      for (const auto &name : names)
        o << io::sha256_file((fs::path(dir) / name).string()) << "\t" << name << "\n";
      write_text(artifact("manifest.tsv"), o.str());
    }
    res.ok = true;
  } catch (const std::exception &e) {
    res.failed_stage = stage;
    res.error = e.what();
    try {
      write_text(artifact("error_report.txt"),
                 "stage\t" + stage + "\nerror\t" + std::string(e.what()) + "\n");
    } catch (...) {
    }
  }
  std::error_code ec;
  fs::remove(lock, ec);
  return res;
}

}  // namespace

RunResult run_experiment(const ExperimentConfig &cfg) { return run_pipeline(cfg, 0); }

std::vector<SweepRow> sweep_scan_time(const ExperimentConfig &cfg,
                                      const std::vector<int> &t_list) {
  if (t_list.empty()) throw ContractError("sweep_scan_time: empty T list");
  std::vector<SweepRow> rows;
  for (int T : t_list) {
    SweepRow row;
    row.frames = T;
    ExperimentConfig sub = cfg;
    sub.output_dir = cfg.output_dir + "/T" + std::to_string(T);
    if (T < 1 || T > cfg.phantom.total_frames()) {
      row.error = "T outside the simulated series length";
    } else {
      RunResult r = run_pipeline(sub, T);
      row.ok = r.ok;
      if (r.ok) {
        row.psnr = r.metrics.at("psnr_mldip");
        row.ssim = r.metrics.at("ssim_mldip");
      } else {
        row.error = r.failed_stage + ": " + r.error;
      }
    }
    rows.push_back(row);
  }
  const std::string dir = resolve_output_dir(cfg.output_dir);
  fs::create_directories(dir);
  std::ostringstream o;
  o << "# T\tpsnr_db\tssim\tstatus\n";
  for (const auto &r : rows) {
    o << r.frames << "\t";
    if (r.ok)
      o << r.psnr << "\t" << r.ssim << "\tok";
    else
      o << "-\t-\tfailed: " << r.error;
    o << "\n";
  }
  write_text((fs::path(dir) / "sweep.tsv").string(), o.str());
  return rows;
}

}  // namespace mldip::harness
