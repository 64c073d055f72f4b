#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cnnflow/cli.hpp"

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
};

cnnflow::Settings resolve(const Common& c) {
  cnnflow::Settings s;
  if (!c.config.empty()) {
    const auto bytes = cnnflow::read_file(c.config);
    cnnflow::apply_config_text(s, std::string(bytes.begin(), bytes.end()), c.config);
  }
  for (const auto& o : c.overrides) cnnflow::apply_override(s, o);
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Siamese patch-feature optical flow: training, matching and evaluation"};
  app.require_subcommand(1);

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"synth", "generate a synthetic dataset with ground-truth flow and occlusion"},
      {"train", "train the feature network on a dataset"},
      {"features", "dump per-scale feature maps for every image"},
      {"flow", "estimate flow with consistency filtering"},
      {"eval-robustness", "matching robustness curves and L2 histogram"},
      {"eval-epe", "endpoint error of estimated flow against ground truth"},
      {"gradcheck", "finite-difference check of every loss gradient"},
  };
  std::vector<Common> opts(commands.size());
  std::vector<CLI::App*> subs;
  for (std::size_t i = 0; i < commands.size(); ++i) {
    auto* sub = app.add_subcommand(commands[i].first, commands[i].second);
    sub->add_option("-c,--config", opts[i].config, "key = value config file")->check(CLI::ExistingFile);
    sub->add_option("-s,--set", opts[i].overrides, "override a config key (key=value), repeatable")
        ->allow_extra_args(false);
    subs.push_back(sub);
  }
  std::string manifest;
  std::string output_root;
  auto* rerun = app.add_subcommand("rerun", "re-execute a run from its run_manifest.json");
  rerun->add_option("manifest", manifest, "run manifest")->required()->check(CLI::ExistingFile);
  rerun->add_option("--output-root", output_root, "write outputs under this directory instead");
  auto* dump = app.add_subcommand("config", "print the resolved configuration");
  Common dump_opts;
  dump->add_option("-c,--config", dump_opts.config)->check(CLI::ExistingFile);
  dump->add_option("-s,--set", dump_opts.overrides)->allow_extra_args(false);

  CLI11_PARSE(app, argc, argv);

  try {
    if (rerun->parsed())
      return cnnflow::rerun(manifest, output_root.empty() ? std::nullopt : std::optional<cnnflow::fs::path>(output_root));
    if (dump->parsed()) {
      auto s = resolve(dump_opts);
      std::cout << cnnflow::config_snapshot(s);
      return 0;
    }
    for (std::size_t i = 0; i < subs.size(); ++i)
      if (subs[i]->parsed()) {
        auto s = resolve(opts[i]);
        return cnnflow::run_command(commands[i].first, s);
      }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
