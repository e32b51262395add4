#include <CLI11.hpp>

#include "mldip/acquisition.hpp"
#include "mldip/baselines.hpp"
#include "mldip/eval.hpp"
#include "mldip/gating.hpp"
#include "mldip/harness.hpp"
#include "mldip/io.hpp"
#include "mldip/mldip.hpp"
#include "mldip/phantom.hpp"
#include "mldip/preprocess.hpp"

#include <cstdio>
#include <string>
#include <vector>

using namespace mldip;

namespace {

int cmd_phantom(const std::string &out_prefix, int repeat, float drift) {
  phantom::PhantomConfig cfg;
  cfg.repeat_factor = repeat;
  cfg.contrast_drift_amplitude = drift;
  phantom::validate(cfg);
  auto series = phantom::generate_phantom_series(cfg);
  io::write_dvs(series.images, out_prefix + "_images.dvs");
  io::write_dvs(series.labels, out_prefix + "_labels.dvs");
  phantom::write_schedule(series.schedule, out_prefix + "_schedule.txt");
  std::printf("phantom: %d frames on %dx%dx%d -> %s_{images,labels}.dvs\n", series.images.frames,
              cfg.grid.n1, cfg.grid.n2, cfg.grid.n3, out_prefix.c_str());
  return 0;
}

int cmd_simulate(const std::string &images_path, const std::string &out_path, int n_coils,
                 int n_ro, float sigma, std::uint64_t seed) {
  auto series = io::read_dvs_complex(images_path);
  auto maps = acquisition::synthesize_coil_maps(series.grid, n_coils, std::uint32_t(seed));
  int gating_slot = n_ro / 2;
  auto pattern =
      acquisition::opra_pattern(series.frames, n_ro, series.grid.n2, series.grid.n3, gating_slot,
                                std::uint32_t(seed ^ 0x9e37u));
  auto ks = acquisition::simulate_acquisition(series, maps, pattern, sigma, seed);
  io::write_kss(ks, out_path);
  io::write_coil_maps(maps, out_path + ".maps.dvs");
  std::printf("simulate: %d frames, %d coils, %d readouts/frame, R=%.0f -> %s\n", ks.frames,
              n_coils, n_ro, acquisition::acceleration_rate(pattern), out_path.c_str());
  return 0;
}

int cmd_gate(const std::string &ks_path, const std::string &out_path, float frame_ms) {
  auto ks = io::read_kss(ks_path);
  auto g = gating::extract_central_lines(ks, 1000.0f / frame_ms);
  auto latent = gating::extract_motion_components(g);
  gating::write_latent(latent, out_path);
  auto beats = gating::detect_beats(latent);
  std::printf("gate: %d frames -> 6 components, %zu beats detected -> %s\n", latent.frames,
              beats.size(), out_path.c_str());
  return 0;
}

int cmd_preprocess(const std::string &ks_path, const std::string &out_path, int n_virtual,
                   int crop_lo, int crop_hi) {
  auto ks = io::read_kss(ks_path);
  if (crop_hi > crop_lo) ks = preprocess::readout_crop(ks, crop_lo, crop_hi);
  if (n_virtual > 0 && n_virtual < ks.n_coils) {
    auto cc = preprocess::pca_coil_compress(ks, n_virtual);
    preprocess::write_compression_matrix(cc, out_path + ".ccm");
    ks = std::move(cc.compressed);
    std::printf("preprocess: %d -> %d coils, retained energy %.4f\n", cc.n_physical, cc.n_virtual,
                cc.retained_energy);
  }
  io::write_kss(ks, out_path);
  return 0;
}

model::ModelConfig model_config_for_cli(const std::string &config_path, int iterations,
                                        std::uint64_t seed) {
  model::ModelConfig cfg = config_path.empty()
                               ? model::ModelConfig::desk_default()
                               : harness::load_config(config_path).model;
  if (iterations > 0) cfg.iterations = iterations;
  if (seed != 0) cfg.seed = std::uint32_t(seed);
  return cfg;
}

int cmd_train(const std::string &ks_path, const std::string &maps_path,
              const std::string &latent_path, const std::string &out_path,
              const std::string &config_path, int iterations, std::uint64_t seed, bool fixed) {
  auto ks = io::read_kss(ks_path);
  auto maps = io::read_coil_maps(maps_path);
  auto latent = gating::read_latent(latent_path);
  auto cfg = model_config_for_cli(config_path, iterations, seed);
  model::TrainedModel m = fixed ? baselines::fixed_template_train(ks, maps, latent, cfg)
                                : model::train(ks, maps, latent, cfg);
  model::save_model(m, out_path);
  std::printf("train: %d iterations, final loss %.6g -> %s\n", cfg.iterations,
              double(m.loss_trace.back()), out_path.c_str());
  return 0;
}

int cmd_infer(const std::string &model_path, const std::string &out_path, int from, int to) {
  auto m = model::load_model(model_path);
  if (to <= 0) to = m.frames;
  auto recon = model::infer(m, from, to);
  io::write_dvs(recon, out_path);
  std::printf("infer: frames %d..%d on %dx%dx%d -> %s\n", from, to, m.grid.n1, m.grid.n2,
              m.grid.n3, out_path.c_str());
  return 0;
}

int cmd_baseline(const std::string &method, const std::string &ks_path,
                 const std::string &maps_path, const std::string &schedule_path,
                 const std::string &out_path, int n_card, int n_resp, float reject,
                 float lambda_t, float lambda_s, int iters) {
  auto ks = io::read_kss(ks_path);
  auto maps = io::read_coil_maps(maps_path);
  if (method == "zero-filled") {
    auto zf = baselines::zero_filled_recon(ks, maps);
    io::write_dvs(zf, out_path);
    std::printf("baseline zero-filled: %d frames -> %s\n", zf.frames, out_path.c_str());
    return 0;
  }
  if (method == "binned") {
    if (schedule_path.empty())
      throw ConfigError("baseline binned needs --schedule (phantom motion schedule)");
    auto sched = phantom::read_schedule(schedule_path);
    auto bins = baselines::bin_frames(sched, n_card, n_resp, reject);
    baselines::write_bin_table(bins, out_path + ".bins.tsv");
    auto br = baselines::binned_cs_recon(ks, maps, bins, lambda_t, lambda_s, iters);
    ImageSeries bs(br.grid, br.n_card * br.n_resp);
    std::copy(br.volumes.begin(), br.volumes.end(), bs.data.begin());
    io::write_dvs(bs, out_path);
    std::printf("baseline binned: %dx%d bins -> %s\n", br.n_card, br.n_resp, out_path.c_str());
    return 0;
  }
  throw ConfigError("unknown baseline method '" + method + "' (zero-filled|binned)");
}

int cmd_eval(const std::string &ref_path, const std::string &test_path,
             const std::string &labels_path, float voxel_mm, const std::string &out_path) {
  auto ref = io::read_dvs_complex(ref_path);
  auto test = io::read_dvs_complex(test_path);
  const int T = std::min(ref.frames, test.frames);
  auto window = [&](const ImageSeries &s) {
    ImageSeries w(s.grid, T);
    std::copy(s.frame(0), s.frame(0) + std::size_t(T) * s.grid.voxels(), w.data.begin());
    return w;
  };
  const ImageSeries ref_w = window(ref), test_w = window(test);
  std::vector<std::pair<std::string, double>> rows;
  rows.emplace_back("frames", T);
  rows.emplace_back("psnr", eval::psnr(ref_w, test_w));
  rows.emplace_back("ssim", eval::ssim(ref_w, test_w));
  if (!labels_path.empty()) {
    auto labels = io::read_dvs_labels(labels_path);
    LabelSeries lab_w(labels.grid, T);
    std::copy(labels.frame(0), labels.frame(0) + std::size_t(T) * labels.grid.voxels(),
              lab_w.data.begin());
    auto ref_curve = eval::volume_curve(ref_w, lab_w, voxel_mm);
    auto test_curve = eval::volume_curve(test_w, lab_w, voxel_mm);
    double err = 0;
    for (int t = 0; t < T; ++t) err += std::abs(ref_curve[std::size_t(t)] - test_curve[std::size_t(t)]);
    rows.emplace_back("volume_mae_ml", err / double(T));
  }
  std::string tsv = "# metric\tvalue\n";
  for (const auto &[k, v] : rows) {
    std::printf("%s\t%.6g\n", k.c_str(), v);
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s\t%.17g\n", k.c_str(), v);
    tsv += buf;
  }
  if (!out_path.empty()) {
    FILE *f = std::fopen(out_path.c_str(), "w");
    if (!f) throw FormatError("cannot open " + out_path + " for writing");
    std::fputs(tsv.c_str(), f);
    std::fclose(f);
  }
  return 0;
}

int cmd_run(const std::string &config_path, bool echo) {
  auto cfg = config_path.empty() ? harness::ExperimentConfig::desk_default()
                                 : harness::load_config(config_path);
  if (echo) {
    std::fputs(harness::config_echo(cfg).c_str(), stdout);
    return 0;
  }
  auto res = harness::run_experiment(cfg);
  for (const auto &[k, v] : res.metrics) std::printf("%s\t%.6g\n", k.c_str(), v);
  if (!res.ok) {
    std::fprintf(stderr, "mldip run: stage '%s' failed: %s\n", res.failed_stage.c_str(),
                 res.error.c_str());
    return 3;
  }
  std::printf("run: artifacts in %s\n", res.output_dir.c_str());
  return 0;
}

int cmd_sweep(const std::string &config_path, const std::vector<int> &t_list) {
  auto cfg = config_path.empty() ? harness::ExperimentConfig::desk_default()
                                 : harness::load_config(config_path);
  auto rows = harness::sweep_scan_time(cfg, t_list);
  bool all_ok = true;
  for (const auto &r : rows) {
    if (r.ok)
      std::printf("T=%d\tpsnr=%.3f\tssim=%.4f\n", r.frames, r.psnr, r.ssim);
    else
      std::printf("T=%d\tfailed: %s\n", r.frames, r.error.c_str());
    all_ok = all_ok && r.ok;
  }
  return all_ok ? 0 : 3;
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"Simulation and reconstruction of real-time volumetric cardiac MRI"};
  app.require_subcommand(1);

  std::string out = "phantom", images, ks_path;
  int repeat = 1, n_coils = 8, n_ro = 11, n_virtual = 0, crop_lo = 0, crop_hi = 0;
  float drift = 0.25f, sigma = 0.0f, frame_ms = 33.0f;
  std::uint64_t seed = 0;

  auto *ph = app.add_subcommand("phantom", "Generate the dynamic phantom");
  ph->add_option("-o,--out", out, "Output prefix");
  ph->add_option("--repeat", repeat, "Base-cycle repeat factor");
  ph->add_option("--drift", drift, "Contrast drift amplitude");

  auto *sim = app.add_subcommand("simulate", "Simulate the accelerated acquisition");
  sim->add_option("-i,--images", images, "Input image series (DVS)")->required();
  sim->add_option("-o,--out", out, "Output k-space (KSS1)")->required();
  sim->add_option("--coils", n_coils);
  sim->add_option("--readouts", n_ro);
  sim->add_option("--noise", sigma);
  sim->add_option("--seed", seed);

  auto *gt = app.add_subcommand("gate", "Extract self-gating motion components");
  gt->add_option("-i,--kspace", ks_path, "Input k-space (KSS1)")->required();
  gt->add_option("-o,--out", out, "Output latent series")->required();
  gt->add_option("--frame-ms", frame_ms, "Frame duration in ms");

  auto *pp = app.add_subcommand("preprocess", "Readout crop and coil compression");
  pp->add_option("-i,--kspace", ks_path, "Input k-space (KSS1)")->required();
  pp->add_option("-o,--out", out, "Output k-space (KSS1)")->required();
  pp->add_option("--virtual-coils", n_virtual);
  pp->add_option("--crop-lo", crop_lo);
  pp->add_option("--crop-hi", crop_hi);

  std::string maps_path, latent_path, model_path, config_path, method = "zero-filled";
  std::string ref_path, test_path, labels_path;
  int iterations = 0, from = 1, to = 0;
  int n_card = 20, n_resp = 4, cs_iters = 30;
  float reject = 0.2f, lambda_t = 0.05f, lambda_s = 0.001f, voxel_mm = 2.0f;
  bool fixed_template = false;
  std::vector<int> t_list;

  auto *tr = app.add_subcommand("train", "Scan-specific joint training of the generators");
  tr->add_option("-i,--kspace", ks_path, "Input k-space (KSS1)")->required();
  tr->add_option("--maps", maps_path, "Coil maps (DVS)")->required();
  tr->add_option("--latent", latent_path, "Self-gating latent series")->required();
  tr->add_option("-o,--out", out, "Output checkpoint (MDL1)")->required();
  tr->add_option("-c,--config", config_path, "Experiment config supplying the [model] section");
  tr->add_option("--iterations", iterations, "Override iteration count");
  tr->add_option("--seed", seed);
  tr->add_flag("--fixed-template", fixed_template, "Train the fixed-template ablation");

  auto *in = app.add_subcommand("infer", "Generate frames from a trained checkpoint");
  in->add_option("-m,--model", model_path, "Checkpoint (MDL1)")->required();
  in->add_option("-o,--out", out, "Output image series (DVS)")->required();
  in->add_option("--from", from, "First frame (1-based)");
  in->add_option("--to", to, "Last frame (default: all)");

  auto *bl = app.add_subcommand("baseline", "Conventional reconstructions");
  bl->add_option("--method", method, "zero-filled|binned");
  bl->add_option("-i,--kspace", ks_path, "Input k-space (KSS1)")->required();
  bl->add_option("--maps", maps_path, "Coil maps (DVS)")->required();
  bl->add_option("--schedule", labels_path, "Motion schedule (binned method)");
  bl->add_option("-o,--out", out, "Output image series (DVS)")->required();
  bl->add_option("--n-card", n_card);
  bl->add_option("--n-resp", n_resp);
  bl->add_option("--reject-threshold", reject);
  bl->add_option("--lambda-t", lambda_t);
  bl->add_option("--lambda-s", lambda_s);
  bl->add_option("--cs-iterations", cs_iters);

  auto *ev = app.add_subcommand("eval", "Compare a reconstruction against a reference");
  ev->add_option("--ref", ref_path, "Reference image series (DVS)")->required();
  ev->add_option("--test", test_path, "Test image series (DVS)")->required();
  ev->add_option("--labels", labels_path, "Truth labels for the volume curve (DVS)");
  ev->add_option("--voxel-mm", voxel_mm, "Voxel edge length in mm");
  ev->add_option("-o,--out", out, "Optional metrics TSV");

  auto *rn = app.add_subcommand("run", "End-to-end experiment from a config file");
  rn->add_option("-c,--config", config_path, "Experiment config (default: desk preset)");
  bool echo = false;
  rn->add_flag("--echo", echo, "Print the fully resolved config and exit");

  auto *sw = app.add_subcommand("sweep", "Scan-time sweep over truncated series");
  sw->add_option("-c,--config", config_path, "Experiment config (default: desk preset)");
  sw->add_option("-T,--frames", t_list, "Frame counts to sweep")->required();

  try {
    app.parse(argc, argv);
    if (ph->parsed()) return cmd_phantom(out, repeat, drift);
    if (sim->parsed()) return cmd_simulate(images, out, n_coils, n_ro, sigma, seed);
    if (gt->parsed()) return cmd_gate(ks_path, out, frame_ms);
    if (pp->parsed()) return cmd_preprocess(ks_path, out, n_virtual, crop_lo, crop_hi);
    if (tr->parsed())
      return cmd_train(ks_path, maps_path, latent_path, out, config_path, iterations, seed,
                       fixed_template);
    if (in->parsed()) return cmd_infer(model_path, out, from, to);
    if (bl->parsed())
      return cmd_baseline(method, ks_path, maps_path, labels_path, out, n_card, n_resp, reject,
                          lambda_t, lambda_s, cs_iters);
    if (ev->parsed()) {
      std::string metrics_out = ev->count("-o") || ev->count("--out") ? out : std::string{};
      return cmd_eval(ref_path, test_path, labels_path, voxel_mm, metrics_out);
    }
    if (rn->parsed()) return cmd_run(config_path, echo);
    if (sw->parsed()) return cmd_sweep(config_path, t_list);
    std::fprintf(stderr, "mldip: no subcommand given\n");
    return 2;
  } catch (const CLI::ParseError &e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const ConfigError &e) {
    std::fprintf(stderr, "mldip: config error: %s\n", e.what());
    return 2;
  } catch (const std::exception &e) {
    std::fprintf(stderr, "mldip: %s\n", e.what());
    return 3;
  }
}
