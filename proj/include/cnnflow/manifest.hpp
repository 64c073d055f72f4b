#pragma once

// Run manifests: config snapshot, seeds, input/output content hashes and
// per-stage wall-clock timings, stored as JSON next to the outputs.

#include <openssl/evp.h>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cnnflow/common.hpp"
#include "cnnflow/io.hpp"
#include "json.hpp"

namespace cnnflow {

// Hex SHA-1 of "blob <size>\0<content>", as git computes blob ids.
inline std::string git_blob_sha1(std::string_view content) {
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  std::unique_ptr<EVP_MD_CTX, void (*)(EVP_MD_CTX*)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  if (!ctx || !EVP_DigestInit_ex(ctx.get(), EVP_sha1(), nullptr) ||
      !EVP_DigestUpdate(ctx.get(), header.data(), header.size()) ||
      !EVP_DigestUpdate(ctx.get(), content.data(), content.size()) || !EVP_DigestFinal_ex(ctx.get(), md, &len))
    raise<Error>("SHA-1 computation failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

inline std::string file_sha1(const fs::path& p) {
  const auto bytes = read_file(p);
  return git_blob_sha1({reinterpret_cast<const char*>(bytes.data()), bytes.size()});
}

struct Artifact {
  std::string path;
  std::string sha1;
};

struct RunManifest {
  std::string command;
  std::string config;  // full key = value snapshot
  std::map<std::string, std::uint64_t> seeds;
  std::vector<Artifact> inputs;
  std::vector<Artifact> outputs;
  std::map<std::string, double> timings;  // seconds per stage

  void add_input(const fs::path& p) {
    for (const auto& a : inputs)
      if (a.path == p.string()) return;
    inputs.push_back({p.string(), file_sha1(p)});
  }
};

inline nlohmann::json to_json(const RunManifest& m) {
  nlohmann::json j;
  j["format"] = "cnnflow-run-1";
  j["command"] = m.command;
  j["config"] = m.config;
  j["seeds"] = m.seeds;
  auto arts = [](const std::vector<Artifact>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& x : v) a.push_back({{"path", x.path}, {"sha1", x.sha1}});
    return a;
  };
  j["inputs"] = arts(m.inputs);
  j["outputs"] = arts(m.outputs);
  j["timings_s"] = m.timings;
  return j;
}

inline RunManifest manifest_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "cnnflow-run-1") raise<FormatError>("not a cnnflow run manifest");
  RunManifest m;
  m.command = j.at("command").get<std::string>();
  m.config = j.at("config").get<std::string>();
  m.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
  for (const auto& a : j.at("inputs")) m.inputs.push_back({a.at("path"), a.at("sha1")});
  for (const auto& a : j.at("outputs")) m.outputs.push_back({a.at("path"), a.at("sha1")});
  if (j.contains("timings_s")) m.timings = j.at("timings_s").get<std::map<std::string, double>>();
  return m;
}

inline RunManifest load_manifest(const fs::path& p) {
  const auto bytes = read_file(p);
  try {
    return manifest_from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
  } catch (const nlohmann::json::exception& e) {
    raise<FormatError>(p.string(), ": ", e.what());
  }
}

inline void save_manifest(const fs::path& p, const RunManifest& m) { write_file(p, to_json(m).dump(2) + "\n"); }

// Wall-clock stage timer.
class StageTimer {
 public:
  StageTimer(RunManifest& m, std::string stage)
      : m_(m), stage_(std::move(stage)), t0_(std::chrono::steady_clock::now()) {}
  ~StageTimer() {
    m_.timings[stage_] += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }
  StageTimer(const StageTimer&) = delete;
  StageTimer& operator=(const StageTimer&) = delete;

 private:
  RunManifest& m_;
  std::string stage_;
  std::chrono::steady_clock::time_point t0_;
};

}  // namespace cnnflow
