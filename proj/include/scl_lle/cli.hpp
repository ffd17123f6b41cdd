#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "scl_lle/common.hpp"
#include "scl_lle/data.hpp"
#include "scl_lle/enhancer.hpp"
#include "scl_lle/metrics.hpp"
#include "scl_lle/trainer.hpp"

namespace scl_lle {
namespace cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitItemFailures = 1;
inline constexpr int kExitUsage = 2;

namespace detail {

inline std::string iso_utc_now() {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace detail

// Written into every output directory before any work starts; a command is
// reproducible from its manifest alone (config + seeds + checkpoint hash).
inline void write_run_manifest(const std::filesystem::path& out_dir, const std::string& command,
                               const nlohmann::json& config, std::uint64_t seed,
                               const std::string& checkpoint_sha1,
                               const std::vector<std::string>& argv) {
  std::filesystem::create_directories(out_dir);
  nlohmann::json m = {{"command", command},
                      {"config", config},
                      {"seed", seed},
                      {"checkpoint_sha1", checkpoint_sha1},
                      {"started_at", detail::iso_utc_now()},
                      {"argv", argv},
                      {"version", version_string()}};
  std::ofstream f(out_dir / "run_manifest.json");
  if (!f) throw IoError("cannot write " + (out_dir / "run_manifest.json").string());
  f << m.dump(1) << "\n";
}

inline std::vector<std::string> collect_argv(int argc, const char* const* argv) {
  std::vector<std::string> out;
  for (int i = 0; i < argc; ++i) out.emplace_back(argv[i]);
  return out;
}

// --------------------------------------------------------------------------
// enhance: apply a checkpoint to every image in a directory
// --------------------------------------------------------------------------

inline int cmd_enhance(const std::filesystem::path& ckpt, const std::filesystem::path& in_dir,
                       const std::filesystem::path& out_dir,
                       const std::vector<std::string>& argv) {
  EnhancerParams params = load_enhancer(ckpt);
  write_run_manifest(out_dir, "enhance",
                     {{"checkpoint", ckpt.string()},
                      {"in", in_dir.string()},
                      {"out", out_dir.string()},
                      {"architecture",
                       {{"width", params.cfg.width}, {"iterations", params.cfg.iterations}}}},
                     params.seed, sha1_file(ckpt), argv);
  auto files = scl_lle::detail::list_images(in_dir);
  if (files.empty()) {
    std::cerr << "warning: no images found in " << in_dir << "\n";
    return kExitOk;
  }
  std::vector<std::string> failures(files.size());
  parallel_for(files.size(), [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      try {
        ImageTensor img = load_image(files[i]);
        // pad to the architecture's stride granularity, enhance, crop back
        const int oh = img.height, ow = img.width;
        int ph = std::max(8, (oh + 3) / 4 * 4);
        int pw = std::max(8, (ow + 3) / 4 * 4);
        ImageTensor padded(ph, pw);
        for (int c = 0; c < 3; ++c)
          for (int y = 0; y < ph; ++y)
            for (int x = 0; x < pw; ++x)
              padded.at(c, y, x) = img.at(c, std::min(y, oh - 1), std::min(x, ow - 1));
        ImageTensor out = enhance(params, padded).first;
        ImageTensor cropped(oh, ow);
        for (int c = 0; c < 3; ++c)
          for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) cropped.at(c, y, x) = out.at(c, y, x);
        save_image(cropped, out_dir / (files[i].stem().string() + ".png"));
      } catch (const std::exception& e) {
        failures[i] = files[i].filename().string() + ": " + e.what();
      }
    }
  });
  int bad = 0;
  for (const auto& f : failures) {
    if (!f.empty()) {
      std::cerr << "error: " << f << "\n";
      ++bad;
    }
  }
  std::cout << "enhanced " << (files.size() - bad) << "/" << files.size() << " images into "
            << out_dir << "\n";
  return bad == 0 ? kExitOk : kExitItemFailures;
}

// --------------------------------------------------------------------------
// darken: gamma degradation protocol
// --------------------------------------------------------------------------

inline int cmd_darken(double gamma, const std::filesystem::path& in_dir,
                      const std::filesystem::path& out_dir,
                      const std::vector<std::string>& argv) {
  if (!(gamma >= 1.0)) throw ConfigError("darken: --gamma must be >= 1");
  write_run_manifest(out_dir, "darken",
                     {{"gamma", gamma}, {"in", in_dir.string()}, {"out", out_dir.string()}}, 0,
                     "", argv);
  auto files = scl_lle::detail::list_images(in_dir);
  if (files.empty()) {
    std::cerr << "warning: no images found in " << in_dir << "\n";
    return kExitOk;
  }
  std::vector<std::string> failures(files.size());
  parallel_for(files.size(), [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      try {
        save_image(gamma_darken(load_image(files[i]), gamma),
                   out_dir / (files[i].stem().string() + ".png"));
      } catch (const std::exception& e) {
        failures[i] = files[i].filename().string() + ": " + e.what();
      }
    }
  });
  int bad = 0;
  for (const auto& f : failures)
    if (!f.empty()) {
      std::cerr << "error: " << f << "\n";
      ++bad;
    }
  std::cout << "darkened " << (files.size() - bad) << "/" << files.size() << " images (gamma "
            << gamma << ") into " << out_dir << "\n";
  return bad == 0 ? kExitOk : kExitItemFailures;
}

// --------------------------------------------------------------------------
// train / ablate
// --------------------------------------------------------------------------

inline int cmd_train(const TrainConfig& cfg, const std::filesystem::path& data_root,
                     const std::filesystem::path& out_dir, const std::filesystem::path& resume,
                     const std::vector<std::string>& argv, const std::string& tag = "") {
  nlohmann::json config = to_json(cfg);
  if (!tag.empty()) config["ablation"] = tag;
  std::string ckpt_hash = resume.empty() ? "" : sha1_file(resume);
  write_run_manifest(out_dir, tag.empty() ? "train" : "ablate:" + tag, config, cfg.seed,
                     ckpt_hash, argv);
  TrainResult r = train(cfg, data_root, out_dir, resume);
  std::cout << (tag.empty() ? std::string("train") : "ablate " + tag) << ": " << r.steps
            << " steps, total loss " << r.first.total << " -> " << r.last.total
            << ", checkpoint " << r.final_checkpoint << "\n";
  return kExitOk;
}

inline TrainConfig apply_ablation_switch(TrainConfig cfg, const std::string& sw) {
  if (sw == "no-lc")
    cfg.weights.contrastive = 0.0;
  else if (sw == "no-lsc")
    cfg.weights.semantic = 0.0;
  else if (sw == "no-lfr")
    cfg.weights.feature_retention = 0.0;
  else if (sw == "no-neg")
    cfg.use_negatives = false;
  else if (sw == "no-over-neg")
    cfg.use_over = false;
  else if (sw == "no-under-neg")
    cfg.use_under = false;
  else
    throw ConfigError("ablate: unknown switch '" + sw +
                      "' (want no-lc|no-lsc|no-lfr|no-neg|no-over-neg|no-under-neg)");
  return cfg;
}

inline int cmd_ablate(const TrainConfig& base, const std::vector<std::string>& switches,
                      const std::filesystem::path& data_root, const std::filesystem::path& out_dir,
                      const std::vector<std::string>& argv) {
  if (switches.empty()) throw ConfigError("ablate: need at least one --switch");
  std::vector<std::pair<std::string, TrainConfig>> runs;
  for (const auto& sw : switches) runs.emplace_back(sw, apply_ablation_switch(base, sw));
  for (const auto& [sw, cfg] : runs) {
    int rc = cmd_train(cfg, data_root, out_dir / sw, {}, argv, sw);
    if (rc != kExitOk) return rc;
  }
  return kExitOk;
}

// --------------------------------------------------------------------------
// eval / fit-niqe
// --------------------------------------------------------------------------

inline int cmd_eval(const EvalOptions& opts, const std::filesystem::path& out_dir,
                    const std::vector<std::string>& argv) {
  write_run_manifest(out_dir, "eval",
                     {{"metrics", opts.metrics},
                      {"pred", opts.pred_dir.string()},
                      {"ref", opts.ref_dir.string()},
                      {"labels", opts.labels_dir.string()},
                      {"niqe_model", opts.niqe_model.string()},
                      {"segmenter", {{"kind", opts.seg.kind}, {"classes", opts.seg.classes}}}},
                     opts.seg.seed, "", argv);
  EvalResult r = eval_report(opts);
  write_eval_report(r, opts.metrics, out_dir);
  std::cout << "evaluated " << r.rows.size() << " images; aggregate:";
  for (const auto& [k, v] : r.aggregate)
    std::cout << " " << k << "=" << scl_lle::detail::metric_str(v);
  std::cout << "\n";
  return kExitOk;
}

inline int cmd_fit_niqe(const std::filesystem::path& in_dir, const std::filesystem::path& out_file,
                        int patch_size, double sharpness,
                        const std::vector<std::string>& argv) {
  auto files = scl_lle::detail::list_images(in_dir);
  if (files.empty()) throw ConfigError("fit-niqe: no images in " + in_dir.string());
  write_run_manifest(out_file.parent_path().empty() ? "." : out_file.parent_path(), "fit-niqe",
                     {{"in", in_dir.string()},
                      {"out", out_file.string()},
                      {"patch_size", patch_size},
                      {"sharpness", sharpness}},
                     0, "", argv);
  std::vector<ImageTensor> corpus;
  corpus.reserve(files.size());
  for (const auto& f : files) corpus.push_back(load_image(f));
  NiqeModel model = fit_niqe(corpus, patch_size, sharpness);
  save_niqe_model(model, out_file);
  std::cout << "fitted pristine model from " << corpus.size() << " images -> " << out_file
            << "\n";
  return kExitOk;
}

// --------------------------------------------------------------------------
// gradcheck / selftest
// --------------------------------------------------------------------------

inline int cmd_gradcheck(std::uint64_t seed) {
  GradCheckReport r = gradient_check(seed);
  for (const auto& e : r.entries) {
    std::printf("[%s] gradient %-18s max rel dev %.3e over %zu checks\n",
                e.pass ? "PASS" : "FAIL", e.term.c_str(), e.max_rel_dev, e.checks);
  }
  std::printf("%s (tolerance %.1e)\n", r.all_pass ? "all gradients verified" : "GRADIENT FAILURES",
              r.tolerance);
  return r.all_pass ? kExitOk : kExitItemFailures;
}

inline int cmd_selftest() {
  std::printf("scl-lle %s\n", version_string().c_str());
  bool all = true;
  auto group = [&all](const char* name, bool ok, const std::string& note = "") {
    std::printf("[%s] invariant %-28s %s\n", ok ? "PASS" : "FAIL", name, note.c_str());
    all = all && ok;
  };

  {  // curve range closure + monotonicity + fixed points
    Rng rng(99, "selftest.curves");
    bool closed = true, monotone = true;
    for (int i = 0; i < 10000; ++i) {
      double x = rng.uniform(), a = rng.uniform(-1.0, 1.0);
      double y = curve_step(x, a);
      closed = closed && y >= 0.0 && y <= 1.0;
      double x2 = rng.uniform();
      double lo = std::min(x, x2), hi = std::max(x, x2);
      monotone = monotone && curve_step(lo, a) <= curve_step(hi, a) + 1e-15;
    }
    group("curve-range-closure", closed);
    group("curve-monotonicity", monotone);
    bool fixed = true;
    for (double a : {-1.0, -0.3, 0.0, 0.7, 1.0})
      fixed = fixed && curve_step(0.0, a) == 0.0 && curve_step(1.0, a) == 1.0;
    group("curve-fixed-points", fixed);
  }
  {  // Gram symmetry / PSD
    Rng rng(100, "selftest.gram");
    bool sym = true, psd = true;
    for (int rep = 0; rep < 20; ++rep) {
      Tensor f({4, 3, 3});
      for (double& v : f.v) v = rng.normal();
      Tensor g = gram_matrix(f);
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) sym = sym && g.v[i * 4 + j] == g.v[j * 4 + i];
      double q[4];
      for (auto& x : q) x = rng.normal();
      double quad = 0.0;
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) quad += q[i] * g.v[i * 4 + j] * q[j];
      psd = psd && quad >= -1e-9;
    }
    group("gram-symmetry", sym);
    group("gram-psd", psd);
  }
  {  // loss non-negativity on random fixtures
    Rng rng(101, "selftest.losses");
    ReferenceFeatureBackend fb;
    TinyCnnSegBackend seg(3);
    bool ok = true;
    for (int rep = 0; rep < 3; ++rep) {
      auto mk = [&rng]() {
        ImageTensor im(8, 8);
        for (double& v : im.data) v = rng.uniform();
        return im;
      };
      ImageTensor ih = mk(), ip = mk(), in = mk(), il = mk();
      LabelMap lab(8, 8, 3);
      for (auto& l : lab.labels) l = std::uint16_t(rng.index(3));
      CurveStack cv(2, 8, 8);
      for (double& v : cv.maps.v) v = rng.uniform(-1.0, 1.0);
      ProbMap probs = seg.segment(ih, &lab);
      LossConfig lc;
      LossReport r = total_loss(lc, fb, il, ih, ip, &in, lab, probs, cv);
      ok = ok && r.l_c >= 0 && r.l_sc >= 0 && r.l_fr >= 0 && r.l_cc >= 0 && r.total >= 0;
    }
    group("loss-non-negativity", ok);
  }
  {  // probability map normalization
    Rng rng(102, "selftest.probs");
    TinyCnnSegBackend seg(5);
    ImageTensor im(8, 8);
    for (double& v : im.data) v = rng.uniform();
    group("probmap-normalization", seg.segment(im, nullptr).valid());
  }
  {  // checkpoint byte-exact round trip
    EnhancerParams p = init_enhancer({4, 2}, 5);
    std::string b1 = serialize_archive(enhancer_to_archive(p));
    Archive back = parse_archive(b1, "selftest");
    std::string b2 = serialize_archive(enhancer_to_archive(enhancer_from_archive(back)));
    group("checkpoint-roundtrip", b1 == b2);
  }
  {  // corrupted archive reports a byte offset
    EnhancerParams p = init_enhancer({4, 2}, 5);
    std::string bytes = serialize_archive(enhancer_to_archive(p));
    bytes[0] = 'X';
    bool ok = false;
    try {
      parse_archive(bytes, "selftest");
    } catch (const FormatError& e) {
      ok = std::string(e.what()).find("offset") != std::string::npos;
    }
    group("checkpoint-corrupt-detect", ok);
  }
  {  // counter RNG determinism
    Rng a(7, "stream"), b(7, "stream");
    bool ok = true;
    for (int i = 0; i < 100; ++i) ok = ok && a.next_u64() == b.next_u64();
    group("rng-determinism", ok);
  }

  int rc = cmd_gradcheck(7);
  all = all && rc == kExitOk;
  std::printf("selftest %s\n", all ? "passed" : "FAILED");
  return all ? kExitOk : kExitItemFailures;
}

// --------------------------------------------------------------------------
// argument surface
// --------------------------------------------------------------------------

inline TrainConfig load_train_config(const std::string& config_path) {
  if (config_path.empty()) {
    TrainConfig c;
    return c;
  }
  std::ifstream f(config_path);
  if (!f) throw IoError("cannot read config " + config_path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + config_path + " is not valid JSON: " + e.what());
  }
  return train_config_from_json(j);
}

inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"semantically contrastive low-light image enhancement toolkit"};
  app.require_subcommand(1);
  std::vector<std::string> full_argv = collect_argv(argc, argv);

  // train
  auto* train_cmd = app.add_subcommand("train", "train an enhancement network");
  std::string t_config, t_data, t_out, t_resume;
  std::uint64_t t_seed = 0;
  long t_max_steps = -1;
  double t_lr = -1;
  int t_batch = -1, t_epochs = -1;
  bool t_seed_set = false;
  train_cmd->add_option("--config", t_config, "JSON config file");
  train_cmd->add_option("--data-root", t_data, "dataset root directory")->required();
  train_cmd->add_option("--out-dir", t_out, "output directory")->required();
  train_cmd->add_option("--resume", t_resume, "checkpoint to resume from");
  train_cmd->add_option("--seed", t_seed, "seed override")->each([&](const std::string&) {
    t_seed_set = true;
  });
  train_cmd->add_option("--max-steps", t_max_steps, "step-budget override");
  train_cmd->add_option("--lr", t_lr, "learning-rate override");
  train_cmd->add_option("--batch-size", t_batch, "batch-size override");
  train_cmd->add_option("--max-epochs", t_epochs, "epoch-budget override");

  // enhance
  auto* enh_cmd = app.add_subcommand("enhance", "apply a checkpoint to a directory of images");
  std::string e_ckpt, e_in, e_out;
  enh_cmd->add_option("--ckpt", e_ckpt, "checkpoint file")->required();
  enh_cmd->add_option("--in", e_in, "input image directory")->required();
  enh_cmd->add_option("--out", e_out, "output directory")->required();

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "metric report over a directory");
  std::string v_metrics = "psnr,ssim", v_pred, v_ref, v_labels, v_niqe, v_out;
  std::string v_seg_kind = "oracle", v_seg_weights;
  int v_classes = 19;
  eval_cmd->add_option("--metrics", v_metrics, "comma list of psnr,ssim,niqe,miou");
  eval_cmd->add_option("--pred", v_pred, "predicted/enhanced image directory")->required();
  eval_cmd->add_option("--ref", v_ref, "reference image directory (psnr/ssim)");
  eval_cmd->add_option("--labels", v_labels, "ground-truth label directory (miou)");
  eval_cmd->add_option("--niqe-model", v_niqe, "pristine model file (niqe)");
  eval_cmd->add_option("--seg", v_seg_kind, "segmenter for miou: oracle|tinycnn|deeplab");
  eval_cmd->add_option("--seg-weights", v_seg_weights, "segmenter weight archive");
  eval_cmd->add_option("--classes", v_classes, "segmentation class count");
  eval_cmd->add_option("--out", v_out, "report output directory")->required();

  // darken
  auto* dark_cmd = app.add_subcommand("darken", "gamma-darken a directory of images");
  double d_gamma = 1.0;
  std::string d_in, d_out;
  dark_cmd->add_option("--gamma", d_gamma, "gamma >= 1")->required();
  dark_cmd->add_option("--in", d_in, "input directory")->required();
  dark_cmd->add_option("--out", d_out, "output directory")->required();

  // ablate
  auto* abl_cmd = app.add_subcommand("ablate", "derived ablation training runs");
  std::string a_config, a_data, a_out;
  std::vector<std::string> a_switches;
  abl_cmd->add_option("--config", a_config, "JSON config file");
  abl_cmd->add_option("--data-root", a_data, "dataset root directory")->required();
  abl_cmd->add_option("--out-dir", a_out, "output directory (one subdir per switch)")->required();
  abl_cmd->add_option("--switch", a_switches,
                      "no-lc|no-lsc|no-lfr|no-neg|no-over-neg|no-under-neg (repeatable)");

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  std::uint64_t g_seed = 7;
  grad_cmd->add_option("--seed", g_seed, "fixture seed");

  // fit-niqe
  auto* fit_cmd = app.add_subcommand("fit-niqe", "fit a pristine NIQE model from a corpus");
  std::string f_in, f_out;
  int f_patch = 96;
  double f_sharp = 0.75;
  fit_cmd->add_option("--in", f_in, "pristine corpus directory")->required();
  fit_cmd->add_option("--out", f_out, "model output file")->required();
  fit_cmd->add_option("--patch-size", f_patch, "patch size (even, >= 8)");
  fit_cmd->add_option("--sharpness", f_sharp, "sharpness selection fraction");

  // selftest
  app.add_subcommand("selftest", "print versions and run the verification micro-suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (train_cmd->parsed()) {
      TrainConfig cfg = load_train_config(t_config);
      if (t_seed_set) cfg.seed = t_seed;
      if (t_max_steps >= 0) cfg.max_steps = t_max_steps;
      if (t_lr > 0) cfg.lr = t_lr;
      if (t_batch > 0) cfg.batch_size = t_batch;
      if (t_epochs > 0) cfg.max_epochs = t_epochs;
      cfg.validate();
      return cmd_train(cfg, t_data, t_out, t_resume, full_argv);
    }
    if (enh_cmd->parsed()) return cmd_enhance(e_ckpt, e_in, e_out, full_argv);
    if (eval_cmd->parsed()) {
      EvalOptions opts;
      std::string cur;
      for (char c : v_metrics + ",") {
        if (c == ',') {
          if (!cur.empty()) opts.metrics.push_back(cur);
          cur.clear();
        } else {
          cur.push_back(c);
        }
      }
      opts.pred_dir = v_pred;
      opts.ref_dir = v_ref;
      opts.labels_dir = v_labels;
      opts.niqe_model = v_niqe;
      opts.seg.kind = v_seg_kind;
      opts.seg.weights = v_seg_weights;
      opts.seg.classes = v_classes;
      return cmd_eval(opts, v_out, full_argv);
    }
    if (dark_cmd->parsed()) return cmd_darken(d_gamma, d_in, d_out, full_argv);
    if (abl_cmd->parsed()) {
      TrainConfig cfg = load_train_config(a_config);
      return cmd_ablate(cfg, a_switches, a_data, a_out, full_argv);
    }
    if (grad_cmd->parsed()) return cmd_gradcheck(g_seed);
    if (fit_cmd->parsed()) return cmd_fit_niqe(f_in, f_out, f_patch, f_sharp, full_argv);
    return cmd_selftest();
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitItemFailures;
  }
}

}  // namespace cli
}  // namespace scl_lle
