#pragma once

// Subcommands behind the cnnflow tool. Each takes fully resolved Settings,
// writes its artifacts under io.output and returns the run manifest.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cnnflow/config.hpp"
#include "cnnflow/eval.hpp"
#include "cnnflow/gradcheck.hpp"
#include "cnnflow/io.hpp"
#include "cnnflow/manifest.hpp"
#include "cnnflow/matcher.hpp"
#include "cnnflow/pyramid.hpp"
#include "cnnflow/sampler.hpp"
#include "cnnflow/train.hpp"

namespace cnnflow {

// ---- dataset manifests ------------------------------------------------

// One line per pair: "img1 img2 flow [occ]" relative to the manifest. The
// optional fourth entry is an occlusion mask image, or "bwd:<flow>" naming a
// backward ground-truth flow from which an occlusion proxy is derived.
struct DatasetEntry {
  fs::path img1, img2, flow;
  std::optional<fs::path> occlusion;
  std::optional<fs::path> backward_flow;
};

inline std::vector<DatasetEntry> read_dataset(const fs::path& manifest) {
  const auto bytes = read_file(manifest);
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  const fs::path base = manifest.parent_path();
  std::vector<DatasetEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.empty()) continue;
    if (tok.size() < 3 || tok.size() > 4)
      raise<FormatError>(manifest.string(), ":", lineno, ": expected 'img1 img2 flow [occlusion]', got ", tok.size(),
                         " fields");
    DatasetEntry e{base / tok[0], base / tok[1], base / tok[2], std::nullopt, std::nullopt};
    if (tok.size() == 4) {
      if (tok[3].rfind("bwd:", 0) == 0)
        e.backward_flow = base / tok[3].substr(4);
      else
        e.occlusion = base / tok[3];
    }
    out.push_back(std::move(e));
  }
  if (out.empty()) raise<FormatError>(manifest.string(), ": dataset manifest lists no pairs");
  return out;
}

// Raw pair (images in [0, 1]). Without any occlusion source only targets
// leaving the frame count as occluded, and the mask is flagged as a proxy.
inline ImagePair load_pair(const DatasetEntry& e, RunManifest* m = nullptr) {
  ImagePair p;
  p.i1 = load_image(e.img1).image;
  p.i2 = load_image(e.img2).image;
  p.flow = load_flow(e.flow);
  if (m) {
    m->add_input(e.img1);
    m->add_input(e.img2);
    m->add_input(e.flow);
  }
  if (e.occlusion) {
    p.occlusion = image_mask(load_image(*e.occlusion).image);
    if (m) m->add_input(*e.occlusion);
  } else if (e.backward_flow) {
    p.occlusion = occlusion_proxy(p.flow, load_flow(*e.backward_flow), 1.5);
    p.occlusion_is_proxy = true;
    if (m) m->add_input(*e.backward_flow);
  } else {
    p.occlusion = Mask(p.flow.width, p.flow.height);
    for (int y = 0; y < p.flow.height; ++y)
      for (int x = 0; x < p.flow.width; ++x) {
        const auto i = p.flow.index(x, y);
        const double tx = x + p.flow.u[i], ty = y + p.flow.v[i];
        p.occlusion.set(x, y, tx < 0 || ty < 0 || tx > p.flow.width - 1 || ty > p.flow.height - 1);
      }
    p.occlusion_is_proxy = true;
  }
  p.validate();
  return p;
}

inline std::vector<ImagePair> load_dataset(const fs::path& manifest, RunManifest* m, bool normalize) {
  if (manifest.empty()) raise<Error>("io.dataset is not set");
  if (m) m->add_input(manifest);
  std::vector<ImagePair> pairs;
  for (const auto& e : read_dataset(manifest)) {
    pairs.push_back(load_pair(e, m));
    if (normalize) normalize_pair(pairs.back());
  }
  return pairs;
}

// ---- run context ------------------------------------------------------

class RunContext {
 public:
  RunContext(Settings& s, std::string command) : settings_(s) {
    manifest_.command = std::move(command);
    out_ = fs::path(s.io.output);
    fs::create_directories(out_);
  }

  Settings& settings() { return settings_; }
  RunManifest& manifest() { return manifest_; }
  const fs::path& output_dir() const { return out_; }

  fs::path emit(const std::string& name, const std::string& bytes) {
    const auto p = out_ / name;
    write_file(p, bytes);
    manifest_.outputs.push_back({p.string(), git_blob_sha1(bytes)});
    return p;
  }

  // For writers that produce the file themselves.
  void record(const fs::path& p) { manifest_.outputs.push_back({p.string(), file_sha1(p)}); }

  RunManifest finish() {
    manifest_.config = config_snapshot(settings_);
    save_manifest(out_ / "run_manifest.json", manifest_);
    return manifest_;
  }

 private:
  Settings& settings_;
  RunManifest manifest_;
  fs::path out_;
};

inline std::string pair_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "pair%03zu", i);
  return buf;
}

inline NetworkParams<float> load_net(const std::string& path, RunManifest& m, const char* what) {
  if (path.empty()) raise<Error>(what, " is not set");
  m.add_input(path);
  return load_checkpoint(path);
}

// ---- subcommands ------------------------------------------------------

inline RunManifest cmd_synth(Settings& s) {
  RunContext run(s, "synth");
  const auto& sy = s.synth;
  run.manifest().seeds["synth.seed"] = sy.seed;
  StageTimer timer(run.manifest(), "synth");
  std::string list;
  for (int i = 0; i < sy.count; ++i) {
    const auto pair = generate_synthetic_pair(derive_seed(sy.seed, static_cast<std::uint64_t>(i)), sy.width, sy.height,
                                              sy.max_disp, sy.occluders, sy.options);
    const auto name = pair_name(static_cast<std::size_t>(i));
    run.emit(name + "_1.pgm", encode_pgm(pair.i1, 65535));
    run.emit(name + "_2.pgm", encode_pgm(pair.i2, 65535));
    run.emit(name + "_flow.flo", encode_flo(pair.flow));
    run.emit(name + "_occ.pgm", encode_pgm(mask_image(pair.occlusion), 255));
    list += name + "_1.pgm " + name + "_2.pgm " + name + "_flow.flo " + name + "_occ.pgm\n";
  }
  run.emit("manifest.txt", list);
  return run.finish();
}

inline RunManifest cmd_train(Settings& s) {
  RunContext run(s, "train");
  auto& m = run.manifest();
  m.seeds["train.seed"] = s.train.seed;
  m.seeds["net.seed"] = s.train.init_seed;
  std::vector<ImagePair> pairs;
  {
    StageTimer t(m, "load");
    pairs = load_dataset(s.io.dataset, &m, true);
  }
  TrainResult res;
  {
    StageTimer t(m, "train");
    res = train(pairs, s.train);
  }
  for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
  run.emit("checkpoint.sfnet", encode_checkpoint(res.params));
  run.emit("train_log.csv", train_log_csv(res.log));
  if (!res.mass_ratio.empty()) {
    std::ostringstream o;
    o.precision(10);
    o << "batch,neg_pos_loss_mass\n";
    for (std::size_t b = 0; b < res.mass_ratio.size(); ++b) o << b + 1 << ',' << res.mass_ratio[b] << '\n';
    run.emit("mining_mass.csv", o.str());
  }
  std::cout << "trained " << s.train.total_batches() << " batches, rejection ratio " << res.rejection_ratio() << "\n";
  return run.finish();
}

namespace cli_detail {

struct Nets {
  NetworkParams<float> full, multi;
};

inline Nets load_nets(Settings& s, RunManifest& m) {
  Nets n;
  n.full = load_net(s.io.checkpoint, m, "io.checkpoint");
  n.multi = s.io.multi_checkpoint.empty() ? n.full : load_net(s.io.multi_checkpoint, m, "io.multi_checkpoint");
  return n;
}

}  // namespace cli_detail

inline RunManifest cmd_features(Settings& s) {
  RunContext run(s, "features");
  auto& m = run.manifest();
  const auto nets = cli_detail::load_nets(s, m);
  const auto pairs = load_dataset(s.io.dataset, &m, true);
  StageTimer t(m, "features");
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const Image* imgs[2] = {&pairs[i].i1, &pairs[i].i2};
    for (int k = 0; k < 2; ++k) {
      const auto pyr = build_pyramid(*imgs[k], s.pyramid, nets.full, nets.multi);
      for (std::size_t sc = 0; sc < pyr.scales(); ++sc)
        run.emit(pair_name(i) + "_i" + std::to_string(k + 1) + "_s" + std::to_string(sc + 1) + ".sfmap",
                 encode_featuremap(pyr.maps[sc]));
    }
  }
  return run.finish();
}

inline RunManifest cmd_flow(Settings& s) {
  RunContext run(s, "flow");
  auto& m = run.manifest();
  m.seeds["match.seed"] = s.flow.match.seed;
  m.seeds["consistency.secondary_seed"] = s.flow.consistency.secondary_seed;
  const auto nets = cli_detail::load_nets(s, m);
  const auto pairs = load_dataset(s.io.dataset, &m, true);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    ScalePyramid p1, p2;
    {
      StageTimer t(m, "pyramid");
      p1 = build_pyramid(pairs[i].i1, s.pyramid, nets.full, nets.multi);
      p2 = build_pyramid(pairs[i].i2, s.pyramid, nets.full, nets.multi);
    }
    StageTimer t(m, "match");
    MatchConfig mc = s.flow.match;
    mc.seed = derive_seed(s.flow.match.seed, i);
    const auto est = estimate_flow(p1, p2, mc, s.flow.consistency);
    run.emit(pair_name(i) + ".flo", encode_flo(est.filtered, s.flow.flo_sentinel));
    Mask valid(est.filtered.width, est.filtered.height);
    valid.data = est.filtered.valid;
    run.emit(pair_name(i) + "_valid.pgm", encode_pgm(mask_image(valid), 255));
    run.emit(pair_name(i) + "_raw.flo", encode_flo(est.forward));
  }
  return run.finish();
}

namespace cli_detail {

inline std::vector<FeatureMap> dense_features(const NetworkParams<float>& net, const std::vector<ImagePair>& pairs,
                                              bool second) {
  std::vector<FeatureMap> out;
  for (const auto& p : pairs) out.push_back(forward_dense(net, second ? p.i2 : p.i1));
  return out;
}

inline std::vector<FeatureMap> lowpassed(const std::vector<FeatureMap>& fms, double factor) {
  std::vector<FeatureMap> out;
  for (const auto& f : fms) out.push_back(lowpass_featuremap(f, factor));
  return out;
}

inline std::vector<RobustnessInput> inputs(const std::vector<FeatureMap>& a, const std::vector<FeatureMap>& b,
                                           const std::vector<ImagePair>& pairs) {
  std::vector<RobustnessInput> in;
  for (std::size_t i = 0; i < pairs.size(); ++i) in.push_back({&a[i], &b[i], &pairs[i]});
  return in;
}

}  // namespace cli_detail

inline RunManifest cmd_eval_robustness(Settings& s) {
  RunContext run(s, "eval-robustness");
  auto& m = run.manifest();
  m.seeds["eval.seed"] = s.eval.robustness.seed;
  const auto net = load_net(s.io.checkpoint, m, "io.checkpoint");
  const auto pairs = load_dataset(s.io.dataset, &m, true);
  RobustnessOptions opt = s.eval.robustness;
  if (s.train.auto_far_cap) {
    const auto auto_dist = NegativeOffsetDist::for_image(pairs[0].i1.width, pairs[0].i1.height);
    opt.negatives = s.train.negatives;
    opt.negatives.far_cap = std::max(auto_dist.far_cap, opt.negatives.near_radius + 1.0);
  } else {
    opt.negatives = s.train.negatives;
  }

  StageTimer t(m, "robustness");
  const auto raw1 = cli_detail::dense_features(net, pairs, false);
  const auto raw2 = cli_detail::dense_features(net, pairs, true);
  const auto f1 = cli_detail::lowpassed(raw1, s.eval.lowpass), f2 = cli_detail::lowpassed(raw2, s.eval.lowpass);
  const auto in = cli_detail::inputs(f1, f2, pairs);
  const auto rep = matching_robustness(in, opt);

  std::optional<RobustnessReport> ref;
  if (!s.io.reference_checkpoint.empty()) {
    const auto rnet = load_net(s.io.reference_checkpoint, m, "io.reference_checkpoint");
    const auto r1 = cli_detail::lowpassed(cli_detail::dense_features(rnet, pairs, false), s.eval.lowpass);
    const auto r2 = cli_detail::lowpassed(cli_detail::dense_features(rnet, pairs, true), s.eval.lowpass);
    ref = matching_robustness(cli_detail::inputs(r1, r2, pairs), opt);
  }
  auto write_curve = [&](const char* name, const std::vector<RobustnessBin>& bins,
                         const std::vector<RobustnessBin>* ref_bins) {
    std::vector<std::optional<double>> e;
    if (ref_bins) e = relative_error(*ref_bins, bins);
    run.emit(name, robustness_csv(bins, rep.r, rep.samples, ref_bins ? &e : nullptr,
                                  ref ? relative_error(ref->r, rep.r) : std::nullopt));
  };
  write_curve("robustness_dist.csv", rep.r_dist, ref ? &ref->r_dist : nullptr);
  write_curve("robustness_flow.csv", rep.r_flow, ref ? &ref->r_flow : nullptr);

  const auto samples = l2_samples_at_distance(in, s.eval.hist_distance, s.eval.hist_samples,
                                              derive_seed(s.eval.robustness.seed, 0x4157));
  run.emit("l2_histogram.csv", histogram_csv(l2_histogram(samples.positive, samples.negative, s.eval.hist_bins)));

  if (!s.eval.lowpass_curve.empty()) {
    std::ostringstream o;
    o.precision(10);
    o << "factor,r,standard_error,samples\n";
    for (double factor : s.eval.lowpass_curve) {
      const auto a = cli_detail::lowpassed(raw1, factor), b = cli_detail::lowpassed(raw2, factor);
      const auto r = matching_robustness(cli_detail::inputs(a, b, pairs), opt);
      o << factor << ',' << r.r << ',' << r.standard_error() << ',' << r.samples << '\n';
    }
    run.emit("lowpass_curve.csv", o.str());
  }
  std::cout << "r = " << rep.r << " (+- " << rep.standard_error() << ", " << rep.samples << " triples, "
            << rep.admissible_pixels << " pixels)\n";
  return run.finish();
}

inline RunManifest cmd_eval_epe(Settings& s) {
  RunContext run(s, "eval-epe");
  auto& m = run.manifest();
  if (s.io.flow_dir.empty()) raise<Error>("io.flow_dir is not set");
  const auto pairs = load_dataset(s.io.dataset, &m, false);
  StageTimer t(m, "epe");
  std::ostringstream o;
  o.precision(10);
  o << "pair,epe_noc,epe_all,pct_noc_3,pct_noc_5,pct_all_3,pct_all_5,n_noc,n_all,skipped_invalid\n";
  double noc_sum = 0, all_sum = 0, noc3 = 0, noc5 = 0, all3 = 0, all5 = 0;
  std::size_t n_noc = 0, n_all = 0, skipped = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const fs::path dir(s.io.flow_dir);
    const auto flo = dir / (pair_name(i) + ".flo");
    const auto valid = dir / (pair_name(i) + "_valid.pgm");
    auto est = load_flow(flo);
    m.add_input(flo);
    if (fs::exists(valid)) {
      est.valid = image_mask(load_image(valid).image).data;
      m.add_input(valid);
    }
    const auto r = epe_metrics(est, pairs[i].flow, &pairs[i].occlusion, s.eval.epe_fill);
    o << pair_name(i) << ',' << r.epe_noc << ',' << r.epe_all << ',' << r.pct_noc_3 << ',' << r.pct_noc_5 << ','
      << r.pct_all_3 << ',' << r.pct_all_5 << ',' << r.n_noc << ',' << r.n_all << ',' << r.skipped_invalid << '\n';
    noc_sum += r.epe_noc * r.n_noc;
    all_sum += r.epe_all * r.n_all;
    noc3 += r.pct_noc_3 * r.n_noc;
    noc5 += r.pct_noc_5 * r.n_noc;
    all3 += r.pct_all_3 * r.n_all;
    all5 += r.pct_all_5 * r.n_all;
    n_noc += r.n_noc;
    n_all += r.n_all;
    skipped += r.skipped_invalid;
  }
  auto div = [](double a, std::size_t n) { return n ? a / static_cast<double>(n) : 0.0; };
  o << (s.eval.epe_fill ? "all_filled_baseline," : "all,") << div(noc_sum, n_noc) << ',' << div(all_sum, n_all) << ','
    << div(noc3, n_noc) << ',' << div(noc5, n_noc) << ',' << div(all3, n_all) << ',' << div(all5, n_all) << ',' << n_noc
    << ',' << n_all << ',' << skipped << '\n';
  run.emit("epe.csv", o.str());
  std::cout << "EPE noc " << div(noc_sum, n_noc) << " px over " << n_noc << " pixels\n";
  return run.finish();
}

// Returns false when any check fails.
inline bool cmd_gradcheck(Settings& s, RunManifest* out = nullptr) {
  RunContext run(s, "gradcheck");
  auto& m = run.manifest();
  m.seeds["gradcheck.seed"] = s.gradcheck_seed;
  StageTimer t(m, "gradcheck");
  const LossKind kinds[] = {LossKind::hinge, LossKind::thresholded, LossKind::gap, LossKind::hinge_hard_mined};
  std::vector<GradcheckSummary> tiny, full;
  for (auto k : kinds) tiny.push_back(gradcheck_loss(tiny_architecture(), k, s.gradcheck_cases, s.gradcheck_seed));
  GradcheckOptions sampled;
  sampled.max_params = 40;
  for (auto k : kinds)
    full.push_back(
        gradcheck_loss(parse_architecture(s.train.architecture), k, 3, derive_seed(s.gradcheck_seed, 9), sampled));
  const std::string table = "# tiny network, every parameter\n" + gradcheck_table(tiny) + "# " +
                            s.train.architecture + ", 40 sampled parameters per case\n" + gradcheck_table(full);
  run.emit("gradcheck.csv", table);
  std::cout << table;
  bool ok = true;
  for (const auto& r : tiny) ok = ok && r.pass();
  for (const auto& r : full) ok = ok && r.pass();
  auto mf = run.finish();
  if (out) *out = mf;
  return ok;
}

// ---- dispatch ---------------------------------------------------------

// io.* paths become absolute so a manifest snapshot is usable from anywhere.
inline void absolutize_paths(Settings& s) {
  for (auto* p : {&s.io.output, &s.io.dataset, &s.io.checkpoint, &s.io.multi_checkpoint, &s.io.reference_checkpoint,
                  &s.io.flow_dir})
    if (!p->empty()) *p = fs::absolute(*p).lexically_normal().string();
}

// Runs `command` with settings; returns the process exit status.
inline int run_command(const std::string& command, Settings& s, RunManifest* out = nullptr) {
  absolutize_paths(s);
  RunManifest m;
  if (command == "synth")
    m = cmd_synth(s);
  else if (command == "train")
    m = cmd_train(s);
  else if (command == "features")
    m = cmd_features(s);
  else if (command == "flow")
    m = cmd_flow(s);
  else if (command == "eval-robustness")
    m = cmd_eval_robustness(s);
  else if (command == "eval-epe")
    m = cmd_eval_epe(s);
  else if (command == "gradcheck") {
    const bool ok = cmd_gradcheck(s, &m);
    if (out) *out = m;
    return ok ? 0 : 2;
  } else
    raise<Error>("unknown command '", command, "'");
  if (out) *out = m;
  return 0;
}

// Re-executes a recorded run. Inputs must still hash to the recorded values;
// with `output_root`, outputs go to output_root / <original output dir name>.
inline int rerun(const fs::path& manifest_path, const std::optional<fs::path>& output_root, RunManifest* out = nullptr) {
  const auto rec = load_manifest(manifest_path);
  for (const auto& in : rec.inputs) {
    if (!fs::exists(in.path)) raise<Error>("rerun: input '", in.path, "' no longer exists");
    if (file_sha1(in.path) != in.sha1) raise<Error>("rerun: input '", in.path, "' changed since the recorded run");
  }
  Settings s;
  apply_config_text(s, rec.config, manifest_path.string());
  if (output_root) s.io.output = (*output_root / fs::path(s.io.output).filename()).string();
  return run_command(rec.command, s, out);
}

}  // namespace cnnflow
