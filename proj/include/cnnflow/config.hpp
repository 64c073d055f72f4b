#pragma once

// Run settings and the line-oriented `key = value` config format
// (`#` comments, dotted keys). Every setting is reachable by key, so configs,
// `--set key=value` overrides and manifest snapshots share one code path.

#include <charconv>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cnnflow/common.hpp"
#include "cnnflow/eval.hpp"
#include "cnnflow/matcher.hpp"
#include "cnnflow/pyramid.hpp"
#include "cnnflow/sampler.hpp"
#include "cnnflow/train.hpp"

namespace cnnflow {

struct SynthSettings {
  int count = 8;
  int width = 96;
  int height = 96;
  double max_disp = 6.0;
  int occluders = 2;
  std::uint64_t seed = 1;
  SynthOptions options{0.02, 0.1, 0.05, 0.6, 4};
};

struct EvalSettings {
  RobustnessOptions robustness;
  double lowpass = 1.0;                // feature low-pass applied before measuring r (1 = raw)
  std::vector<double> lowpass_curve;   // optional extra factors written to lowpass_curve.csv
  int hist_bins = 40;
  int hist_distance = 10;
  std::size_t hist_samples = 2000;
  bool epe_fill = false;  // nearest-valid filler for EPE-all (not part of the method)
};

struct FlowSettings {
  MatchConfig match;
  ConsistencyConfig consistency;
  bool flo_sentinel = false;  // write invalid pixels as 1e9
};

struct IoSettings {
  std::string output = "out";
  std::string dataset;           // dataset manifest
  std::string checkpoint;        // full-resolution network
  std::string multi_checkpoint;  // multi-resolution network (empty: reuse checkpoint)
  std::string reference_checkpoint;  // reference network for E (optional)
  std::string flow_dir;          // flow estimates for eval-epe
};

struct Settings {
  TrainConfig train;
  PyramidConfig pyramid;
  FlowSettings flow;
  EvalSettings eval;
  SynthSettings synth;
  IoSettings io;
  std::size_t gradcheck_cases = 100;
  std::uint64_t gradcheck_seed = 1;
};

namespace config_detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc{} || ptr != end) raise<FormatError>("expected a number, got '", v, "'");
  return out;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  raise<FormatError>("expected true/false, got '", v, "'");
}

// Shortest text that parses back to the same double.
inline std::string fmt_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

inline std::vector<double> parse_double_list(const std::string& v) {
  std::vector<double> out;
  for (const auto& t : split(v, ',')) out.push_back(parse_number<double>(t));
  return out;
}

inline std::string fmt_double_list(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt_double(v[i]);
  return s;
}

// "2x4,1x2@0.5": radius x count [@ quantum]
inline SearchSchedule parse_schedule(const std::string& v) {
  SearchSchedule s;
  s.stages.clear();
  for (const auto& tok : split(v, ',')) {
    SearchStage st;
    const auto x = tok.find('x');
    if (x == std::string::npos) raise<FormatError>("schedule stage '", tok, "' is not RxN[@q]");
    const auto at = tok.find('@');
    st.radius = parse_number<double>(tok.substr(0, x));
    st.count = parse_number<int>(tok.substr(x + 1, at == std::string::npos ? std::string::npos : at - x - 1));
    st.quantum = at == std::string::npos ? 1.0 : parse_number<double>(tok.substr(at + 1));
    s.stages.push_back(st);
  }
  s.validate();
  return s;
}

inline std::string fmt_schedule(const SearchSchedule& s) {
  std::string out;
  for (std::size_t i = 0; i < s.stages.size(); ++i) {
    const auto& st = s.stages[i];
    out += (i ? "," : "") + fmt_double(st.radius) + "x" + std::to_string(st.count);
    if (st.quantum != 1.0) out += "@" + fmt_double(st.quantum);
  }
  return out;
}

}  // namespace config_detail

struct ConfigField {
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

// Every configurable key, bound to `s`. Order defines the snapshot layout.
inline std::vector<ConfigField> config_fields(Settings& s) {
  using namespace config_detail;
  std::vector<ConfigField> f;
  auto num = [&f](std::string key, auto& ref) {
    using T = std::remove_reference_t<decltype(ref)>;
    f.push_back({std::move(key),
                 [&ref] {
                   if constexpr (std::is_floating_point_v<T>)
                     return fmt_double(ref);
                   else
                     return std::to_string(ref);
                 },
                 [&ref](const std::string& v) { ref = parse_number<T>(v); }});
  };
  auto flag = [&f](std::string key, bool& ref) {
    f.push_back({std::move(key), [&ref] { return std::string(ref ? "true" : "false"); },
                 [&ref](const std::string& v) { ref = parse_bool(v); }});
  };
  auto text = [&f](std::string key, std::string& ref) {
    f.push_back({std::move(key), [&ref] { return ref; }, [&ref](const std::string& v) { ref = v; }});
  };
  auto custom = [&f](std::string key, std::function<std::string()> g, std::function<void(const std::string&)> st) {
    f.push_back({std::move(key), std::move(g), std::move(st)});
  };

  auto& t = s.train;
  custom("loss.kind", [&t] { return std::string(to_string(t.loss.kind)); },
         [&t](const std::string& v) { t.loss.kind = parse_loss_kind(v); });
  num("loss.m", t.loss.m);
  num("loss.t", t.loss.t);
  num("loss.g", t.loss.g);
  num("loss.mining_factor", t.loss.mining_factor);
  num("lr.start", t.lr_start);
  num("lr.end", t.lr_end);
  num("train.batch_size", t.batch_size);
  num("train.samples", t.samples);
  num("train.levels", t.levels);
  num("train.level_ratio", t.level_ratio);
  num("train.seed", t.seed);
  num("train.log_every", t.log_every);
  num("train.candidate_chunk", t.candidate_chunk);
  custom("train.grad_reduction", [&t] { return std::string(t.reduction == GradReduction::sum ? "sum" : "mean"); },
         [&t](const std::string& v) {
           if (v == "sum")
             t.reduction = GradReduction::sum;
           else if (v == "mean")
             t.reduction = GradReduction::mean;
           else
             raise<FormatError>("expected sum or mean, got '", v, "'");
         });
  num("sgd.momentum", t.sgd.momentum);
  num("sgd.weight_decay", t.sgd.weight_decay);
  text("net.architecture", t.architecture);
  num("net.seed", t.init_seed);
  num("negatives.min_distance", t.negatives.min_distance);
  num("negatives.near_radius", t.negatives.near_radius);
  num("negatives.near_probability", t.negatives.near_probability);
  custom("negatives.far_cap", [&t] { return t.auto_far_cap ? std::string("auto") : fmt_double(t.negatives.far_cap); },
         [&t](const std::string& v) {
           t.auto_far_cap = v == "auto";
           if (!t.auto_far_cap) t.negatives.far_cap = parse_number<double>(v);
         });

  auto& p = s.pyramid;
  custom("pyramid.scales",
         [&p] {
           std::string o;
           for (std::size_t i = 0; i < p.scale_factors.size(); ++i) o += (i ? "," : "") + std::to_string(p.scale_factors[i]);
           return o;
         },
         [&p](const std::string& v) {
           p.scale_factors.clear();
           for (const auto& tok : split(v, ',')) p.scale_factors.push_back(parse_number<int>(tok));
         });
  num("pyramid.lowpass_factor", p.lowpass_factor);
  num("pyramid.extra_scale2_lowpass", p.extra_scale2_lowpass);
  flag("pyramid.lowpass_enabled", p.lowpass_enabled);
  custom("pyramid.mode", [&p] { return std::string(p.mode == PyramidMode::legacy ? "legacy" : "multi_resolution"); },
         [&p](const std::string& v) {
           if (v == "legacy")
             p.mode = PyramidMode::legacy;
           else if (v == "multi_resolution")
             p.mode = PyramidMode::multi_resolution;
           else
             raise<FormatError>("expected legacy or multi_resolution, got '", v, "'");
         });

  auto& fl = s.flow;
  custom("match.schedule", [&fl] { return fmt_schedule(fl.match.schedule); },
         [&fl](const std::string& v) { fl.match.schedule = parse_schedule(v); });
  num("match.max_disp", fl.match.max_disp);
  num("match.seed", fl.match.seed);
  num("consistency.epsilon", fl.consistency.epsilon);
  flag("consistency.secondary", fl.consistency.secondary_enabled);
  num("consistency.secondary_seed", fl.consistency.secondary_seed);
  flag("flow.sentinel", fl.flo_sentinel);

  auto& e = s.eval;
  num("eval.negatives_per_pixel", e.robustness.negatives_per_pixel);
  num("eval.pixel_step", e.robustness.pixel_step);
  num("eval.seed", e.robustness.seed);
  num("eval.lowpass", e.lowpass);
  custom("eval.lowpass_curve", [&e] { return fmt_double_list(e.lowpass_curve); },
         [&e](const std::string& v) { e.lowpass_curve = parse_double_list(v); });
  num("eval.hist_bins", e.hist_bins);
  num("eval.hist_distance", e.hist_distance);
  num("eval.hist_samples", e.hist_samples);
  flag("eval.epe_fill", e.epe_fill);

  auto& sy = s.synth;
  num("synth.count", sy.count);
  num("synth.width", sy.width);
  num("synth.height", sy.height);
  num("synth.max_disp", sy.max_disp);
  num("synth.occluders", sy.occluders);
  num("synth.seed", sy.seed);
  num("synth.noise", sy.options.noise_sigma);
  num("synth.gain_jitter", sy.options.gain_jitter);
  num("synth.bias_jitter", sy.options.bias_jitter);
  num("synth.blur", sy.options.i2_blur_sigma);
  num("synth.bumps", sy.options.bumps);

  text("io.output", s.io.output);
  text("io.dataset", s.io.dataset);
  text("io.checkpoint", s.io.checkpoint);
  text("io.multi_checkpoint", s.io.multi_checkpoint);
  text("io.reference_checkpoint", s.io.reference_checkpoint);
  text("io.flow_dir", s.io.flow_dir);

  num("gradcheck.cases", s.gradcheck_cases);
  num("gradcheck.seed", s.gradcheck_seed);
  return f;
}

// Sets one key; `where` prefixes diagnostics (e.g. "run.cfg:12").
inline void apply_setting(Settings& s, const std::string& key, const std::string& value, const std::string& where) {
  for (auto& f : config_fields(s))
    if (f.key == key) {
      try {
        f.set(value);
      } catch (const Error& e) {
        raise<FormatError>(where, ": bad value for '", key, "': ", e.what());
      }
      return;
    }
  raise<FormatError>(where, ": unknown key '", key, "'");
}

inline void apply_config_text(Settings& s, std::string_view text, const std::string& name) {
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto body = config_detail::trim(line);
    if (body.empty()) continue;
    const std::string where = name + ":" + std::to_string(lineno);
    const auto eq = body.find('=');
    if (eq == std::string::npos) raise<FormatError>(where, ": expected 'key = value', got '", body, "'");
    const auto key = config_detail::trim(std::string_view(body).substr(0, eq));
    if (key.empty()) raise<FormatError>(where, ": missing key before '='");
    apply_setting(s, key, config_detail::trim(std::string_view(body).substr(eq + 1)), where);
  }
}

// "key=value" from the command line.
inline void apply_override(Settings& s, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) raise<FormatError>("--set: expected key=value, got '", assignment, "'");
  apply_setting(s, config_detail::trim(std::string_view(assignment).substr(0, eq)),
                config_detail::trim(std::string_view(assignment).substr(eq + 1)), "--set " + assignment);
}

// Full snapshot; applying it to default Settings reproduces `s` exactly.
inline std::string config_snapshot(Settings& s) {
  std::string out;
  for (auto& f : config_fields(s)) out += f.key + " = " + f.get() + "\n";
  return out;
}

}  // namespace cnnflow
