#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "voxdiff/codec.hpp"
#include "voxdiff/denoiser.hpp"
#include "voxdiff/sdf.hpp"

namespace voxdiff {

// All artifact files start with a 5-byte magic and store little-endian
// payloads: TSDF1 volumes, CDBK1 codebooks, TOKM1 token maps, CKPT1
// checkpoints.

namespace io_detail {

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void read_bytes(std::istream& is, void* p, size_t n, const std::string& path) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  require_data(static_cast<size_t>(is.gcount()) == n, path + ": truncated file");
}

template <typename T>
void write_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  write_bytes(os, buf, sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const std::string& path) {
  unsigned char buf[sizeof(T)];
  read_bytes(is, buf, sizeof(T), path);
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

inline void write_magic(std::ostream& os, const char magic[6]) { write_bytes(os, magic, 5); }

inline void expect_magic(std::istream& is, const char magic[6], const std::string& path) {
  char buf[5];
  read_bytes(is, buf, 5, path);
  require_data(std::memcmp(buf, magic, 5) == 0,
               path + ": bad magic, expected \"" + std::string(magic, 5) + "\"");
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  require_data(os.good(), path + ": cannot open for writing");
  return os;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require_data(is.good(), path + ": cannot open for reading");
  return is;
}

}  // namespace io_detail

// --------------------------------------------------------------------------
// TSDF1: magic, u32 dims (H, W, D), f32 truncation, H*W*D f32 x-fastest.
// --------------------------------------------------------------------------

inline void write_tsdf(const std::string& path, const TsdfGrid& grid) {
  using namespace io_detail;
  auto os = open_out(path);
  write_magic(os, "TSDF1");
  for (int d = 0; d < 3; ++d) write_le<uint32_t>(os, static_cast<uint32_t>(grid.dims[d]));
  write_le<float>(os, static_cast<float>(grid.truncation));
  for (double v : grid.values) write_le<float>(os, static_cast<float>(v));
}

inline TsdfGrid read_tsdf(const std::string& path) {
  using namespace io_detail;
  auto is = open_in(path);
  expect_magic(is, "TSDF1", path);
  TsdfGrid g;
  for (int d = 0; d < 3; ++d) g.dims[d] = read_le<uint32_t>(is, path);
  require_data(g.dims[0] > 0 && g.dims[1] > 0 && g.dims[2] > 0, path + ": zero dimension");
  g.truncation = read_le<float>(is, path);
  g.values.resize(g.numel());
  for (auto& v : g.values) {
    v = read_le<float>(is, path);
    require_data(std::isfinite(v), path + ": non-finite voxel value");
  }
  return g;
}

// --------------------------------------------------------------------------
// CDBK1: magic, u32 K, u32 n_z, K*n_z f32.
// --------------------------------------------------------------------------

inline void write_codebook(const std::string& path, const Codebook& cb) {
  using namespace io_detail;
  auto os = open_out(path);
  write_magic(os, "CDBK1");
  write_le<uint32_t>(os, static_cast<uint32_t>(cb.K));
  write_le<uint32_t>(os, static_cast<uint32_t>(cb.n_z));
  for (double v : cb.entries) write_le<float>(os, static_cast<float>(v));
}

inline Codebook read_codebook(const std::string& path) {
  using namespace io_detail;
  auto is = open_in(path);
  expect_magic(is, "CDBK1", path);
  Codebook cb;
  cb.K = static_cast<int>(read_le<uint32_t>(is, path));
  cb.n_z = static_cast<int>(read_le<uint32_t>(is, path));
  require_data(cb.K >= 2 && cb.n_z >= 1, path + ": invalid codebook header");
  cb.entries.resize(static_cast<size_t>(cb.K) * cb.n_z);
  for (auto& v : cb.entries) {
    v = read_le<float>(is, path);
    require_data(std::isfinite(v), path + ": non-finite codebook entry");
  }
  return cb;
}

// --------------------------------------------------------------------------
// TOKM1: magic, u32 patches-per-axis triple, u32 K, i32 class label
// (-1 = none), N u32 indices. Patch edge is supplied by the codec on read.
// --------------------------------------------------------------------------

inline void write_tokens(const std::string& path, const TokenMap& map, int K) {
  using namespace io_detail;
  auto os = open_out(path);
  write_magic(os, "TOKM1");
  for (int d = 0; d < 3; ++d)
    write_le<uint32_t>(os, static_cast<uint32_t>(map.patch_spec.per_axis[d]));
  write_le<uint32_t>(os, static_cast<uint32_t>(K));
  write_le<int32_t>(os, static_cast<int32_t>(map.class_label));
  for (int s : map.indices) write_le<uint32_t>(os, static_cast<uint32_t>(s));
}

struct TokenFile {
  TokenMap map;
  int K = 0;
};

inline TokenFile read_tokens(const std::string& path, int64_t patch_edge) {
  using namespace io_detail;
  auto is = open_in(path);
  expect_magic(is, "TOKM1", path);
  TokenFile out;
  out.map.patch_spec.edge = patch_edge;
  for (int d = 0; d < 3; ++d)
    out.map.patch_spec.per_axis[d] = read_le<uint32_t>(is, path);
  out.K = static_cast<int>(read_le<uint32_t>(is, path));
  out.map.class_label = read_le<int32_t>(is, path);
  const int64_t n = out.map.patch_spec.count();
  require_data(n > 0, path + ": empty token map");
  out.map.indices.resize(n);
  for (auto& s : out.map.indices) {
    s = static_cast<int>(read_le<uint32_t>(is, path));
    require_data(s >= 0 && s <= out.K, path + ": token index exceeds codebook size");
  }
  return out;
}

// --------------------------------------------------------------------------
// CKPT1: magic, u32 tensor count, then per tensor u16 name length, name
// bytes, u8 rank, u32 extents, f32 values.
// --------------------------------------------------------------------------

inline void write_checkpoint(const std::string& path, const std::vector<Tensor>& tensors) {
  using namespace io_detail;
  auto os = open_out(path);
  write_magic(os, "CKPT1");
  write_le<uint32_t>(os, static_cast<uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    require(!t.name().empty(), "checkpoint tensors must be named");
    write_le<uint16_t>(os, static_cast<uint16_t>(t.name().size()));
    write_bytes(os, t.name().data(), t.name().size());
    write_le<uint8_t>(os, static_cast<uint8_t>(t.rank()));
    for (int64_t d : t.shape()) write_le<uint32_t>(os, static_cast<uint32_t>(d));
    for (real v : t.value()) write_le<float>(os, static_cast<float>(v));
  }
}

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

inline std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
  using namespace io_detail;
  auto is = open_in(path);
  expect_magic(is, "CKPT1", path);
  const uint32_t count = read_le<uint32_t>(is, path);
  std::vector<CheckpointEntry> out(count);
  for (auto& e : out) {
    const uint16_t len = read_le<uint16_t>(is, path);
    e.name.resize(len);
    read_bytes(is, e.name.data(), len, path);
    const uint8_t rank = read_le<uint8_t>(is, path);
    e.shape.resize(rank);
    int64_t n = 1;
    for (auto& d : e.shape) {
      d = read_le<uint32_t>(is, path);
      n *= d;
    }
    e.values.resize(n);
    for (auto& v : e.values) {
      v = read_le<float>(is, path);
      require_data(std::isfinite(v), path + ": non-finite checkpoint value");
    }
  }
  return out;
}

// Overwrites matching parameters in place; every parameter must be present
// with a matching shape.
inline void load_checkpoint_into(const std::string& path, std::vector<Tensor> params) {
  auto entries = read_checkpoint(path);
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  for (auto& p : params) {
    auto it = by_name.find(p.name());
    require_data(it != by_name.end(), path + ": missing tensor \"" + p.name() + "\"");
    require_data(it->second->shape == p.shape(),
                 path + ": shape mismatch for \"" + p.name() + "\"");
    for (int64_t i = 0; i < p.numel(); ++i) p.value()[i] = static_cast<real>(it->second->values[i]);
  }
}

// Codec geometry is recoverable from tensor shapes (edge^3 rows, n_z cols).
inline CodecParams read_codec_checkpoint(const std::string& path) {
  auto entries = read_checkpoint(path);
  int64_t patch_dim = 0, n_z = 0;
  for (const auto& e : entries) {
    if (e.name == "codec.enc_w1") patch_dim = e.shape[0];
    if (e.name == "codec.enc_w2") n_z = e.shape[1];
  }
  require_data(patch_dim > 0 && n_z > 0, path + ": not a codec checkpoint");
  const auto edge = static_cast<int64_t>(std::lround(std::cbrt(static_cast<double>(patch_dim))));
  require_data(edge * edge * edge == patch_dim, path + ": patch dimension is not a cube");
  CodecParams p = init_codec_params(edge, n_z, 0);
  load_checkpoint_into(path, p.all());
  return p;
}

// --------------------------------------------------------------------------
// Denoiser config sidecar (flat text).
// --------------------------------------------------------------------------

inline std::string condition_mode_name(DenoiserConfig::Condition c) {
  switch (c) {
    case DenoiserConfig::Condition::none: return "none";
    case DenoiserConfig::Condition::class_label: return "class";
    case DenoiserConfig::Condition::token_sequence: return "token-sequence";
  }
  return "none";
}

inline DenoiserConfig::Condition condition_mode_from(const std::string& s) {
  if (s == "none") return DenoiserConfig::Condition::none;
  if (s == "class") return DenoiserConfig::Condition::class_label;
  if (s == "token-sequence") return DenoiserConfig::Condition::token_sequence;
  throw DataError("unknown condition mode: " + s);
}

inline void write_denoiser_config(const std::string& path, const DenoiserConfig& c) {
  std::ofstream os(path);
  require_data(os.good(), path + ": cannot open for writing");
  os << "channels = " << c.channels << "\n"
     << "ordinary_blocks = " << c.ordinary_blocks << "\n"
     << "mfm_layers = " << c.mfm_layers << "\n"
     << "heads = " << c.heads << "\n"
     << "mlp_ratio = " << c.mlp_ratio << "\n"
     << "num_classes = " << c.num_classes << "\n"
     << "condition_mode = " << condition_mode_name(c.condition_mode) << "\n"
     << "K = " << c.K << "\n"
     << "patch_grid = " << c.patch_grid[0] << " " << c.patch_grid[1] << " " << c.patch_grid[2]
     << "\n"
     << "T = " << c.T << "\n"
     << "mfm_pool = " << c.mfm_pool << "\n"
     << "cond_vocab = " << c.cond_vocab << "\n";
}

inline DenoiserConfig read_denoiser_config(const std::string& path) {
  std::ifstream is(path);
  require_data(is.good(), path + ": cannot open for reading");
  DenoiserConfig c;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key, eq;
    ls >> key >> eq;
    require_data(eq == "=", path + ": malformed line \"" + line + "\"");
    if (key == "channels") ls >> c.channels;
    else if (key == "ordinary_blocks") ls >> c.ordinary_blocks;
    else if (key == "mfm_layers") ls >> c.mfm_layers;
    else if (key == "heads") ls >> c.heads;
    else if (key == "mlp_ratio") ls >> c.mlp_ratio;
    else if (key == "num_classes") ls >> c.num_classes;
    else if (key == "condition_mode") {
      std::string v;
      ls >> v;
      c.condition_mode = condition_mode_from(v);
    } else if (key == "K") ls >> c.K;
    else if (key == "patch_grid") ls >> c.patch_grid[0] >> c.patch_grid[1] >> c.patch_grid[2];
    else if (key == "T") ls >> c.T;
    else if (key == "mfm_pool") ls >> c.mfm_pool;
    else if (key == "cond_vocab") ls >> c.cond_vocab;
    else throw DataError(path + ": unknown key \"" + key + "\"");
  }
  return c;
}

// --------------------------------------------------------------------------
// Run configuration: flat `key = value` with [sections]. Unknown keys are
// errors so typos never fall back to defaults silently.
// --------------------------------------------------------------------------

struct RunConfig {
  // geometry
  int64_t grid_dim = 16;
  int64_t patch_edge = 4;
  double truncation = 0.2;
  // corpus
  int corpus_count = 200;
  int classes = 3;
  // codec training
  CodecTrainOptions codec;
  // schedule
  int T = 25;
  std::string schedule_kind = "linear-cumulative";
  // denoiser architecture
  int channels = 64;
  int ordinary_blocks = 4;
  int mfm_layers = 3;
  int heads = 2;
  int mlp_ratio = 4;
  int mfm_pool = 2;
  // diffusion training
  DenoiserTrainOptions train;
  // sampling
  double guidance_w = 0.5;
  double k_complete = 0.5;
  double k_denoise = 0.5;
  double k_edit = 0.98;
  int n_samples = 1;
  int surface_points = 256;
  // run
  uint64_t seed = 0;
  int threads = 0;  // 0 = library default
};

inline RunConfig parse_config_text(const std::string& text, const std::string& origin = "config") {
  RunConfig c;
  using Setter = std::function<void(const std::string&)>;
  const auto num = [](const std::string& v) { return std::stod(v); };
  std::map<std::string, Setter> keys;
  const auto reg = [&](const std::string& k, Setter s) { keys[k] = std::move(s); };

  reg("geometry.grid_dim", [&](const std::string& v) { c.grid_dim = std::stoll(v); });
  reg("geometry.patch_edge", [&](const std::string& v) { c.patch_edge = std::stoll(v); });
  reg("geometry.truncation", [&](const std::string& v) { c.truncation = num(v); });
  reg("corpus.count", [&](const std::string& v) { c.corpus_count = std::stoi(v); });
  reg("corpus.classes", [&](const std::string& v) { c.classes = std::stoi(v); });
  reg("codec.K", [&](const std::string& v) { c.codec.K = std::stoi(v); });
  reg("codec.n_z", [&](const std::string& v) { c.codec.n_z = std::stoi(v); });
  reg("codec.beta", [&](const std::string& v) { c.codec.beta = num(v); });
  reg("codec.lr", [&](const std::string& v) { c.codec.lr = num(v); });
  reg("codec.batch", [&](const std::string& v) { c.codec.batch = std::stoi(v); });
  reg("codec.warmup_steps", [&](const std::string& v) { c.codec.warmup_steps = std::stoi(v); });
  reg("codec.joint_steps", [&](const std::string& v) { c.codec.joint_steps = std::stoi(v); });
  reg("codec.kmeans_iters", [&](const std::string& v) { c.codec.kmeans_iters = std::stoi(v); });
  reg("codec.lr_halve_every", [&](const std::string& v) { c.codec.lr_halve_every = std::stoi(v); });
  reg("schedule.T", [&](const std::string& v) { c.T = std::stoi(v); });
  reg("schedule.kind", [&](const std::string& v) { c.schedule_kind = v; });
  reg("denoiser.channels", [&](const std::string& v) { c.channels = std::stoi(v); });
  reg("denoiser.ordinary_blocks",
      [&](const std::string& v) { c.ordinary_blocks = std::stoi(v); });
  reg("denoiser.mfm_layers", [&](const std::string& v) { c.mfm_layers = std::stoi(v); });
  reg("denoiser.heads", [&](const std::string& v) { c.heads = std::stoi(v); });
  reg("denoiser.mlp_ratio", [&](const std::string& v) { c.mlp_ratio = std::stoi(v); });
  reg("denoiser.mfm_pool", [&](const std::string& v) { c.mfm_pool = std::stoi(v); });
  reg("training.steps", [&](const std::string& v) { c.train.steps = std::stoi(v); });
  reg("training.batch", [&](const std::string& v) { c.train.batch = std::stoi(v); });
  reg("training.lr", [&](const std::string& v) { c.train.lr = num(v); });
  reg("training.weight_decay", [&](const std::string& v) { c.train.weight_decay = num(v); });
  reg("training.lambda", [&](const std::string& v) { c.train.lambda_aux = num(v); });
  reg("training.dropout_p", [&](const std::string& v) { c.train.dropout_p = num(v); });
  reg("training.lr_decay_every",
      [&](const std::string& v) { c.train.lr_decay_every = std::stoi(v); });
  reg("training.lr_decay_factor",
      [&](const std::string& v) { c.train.lr_decay_factor = num(v); });
  reg("sampling.guidance_w", [&](const std::string& v) { c.guidance_w = num(v); });
  reg("sampling.k_complete", [&](const std::string& v) { c.k_complete = num(v); });
  reg("sampling.k_denoise", [&](const std::string& v) { c.k_denoise = num(v); });
  reg("sampling.k_edit", [&](const std::string& v) { c.k_edit = num(v); });
  reg("sampling.n_samples", [&](const std::string& v) { c.n_samples = std::stoi(v); });
  reg("sampling.surface_points", [&](const std::string& v) { c.surface_points = std::stoi(v); });
  reg("run.seed", [&](const std::string& v) { c.seed = std::stoull(v); });
  reg("run.threads", [&](const std::string& v) { c.threads = std::stoi(v); });

  std::istringstream is(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    // trim
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    line = line.substr(b, e - b + 1);
    if (line.front() == '[') {
      require_data(line.back() == ']', origin + ": malformed section at line " +
                                           std::to_string(line_no));
      section = line.substr(1, line.size() - 2);
      continue;
    }
    const auto eq = line.find('=');
    require_data(eq != std::string::npos,
                 origin + ": expected key = value at line " + std::to_string(line_no));
    std::string key = line.substr(0, eq);
    std::string val = line.substr(eq + 1);
    const auto kend = key.find_last_not_of(" \t");
    key = key.substr(0, kend + 1);
    const auto vbeg = val.find_first_not_of(" \t");
    require_data(vbeg != std::string::npos,
                 origin + ": empty value at line " + std::to_string(line_no));
    val = val.substr(vbeg);
    const std::string full = section.empty() ? key : section + "." + key;
    auto it = keys.find(full);
    require_data(it != keys.end(), origin + ": unknown key \"" + full + "\"");
    it->second(val);
  }
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  require_data(is.good(), path + ": cannot open config");
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_config_text(buf.str(), path);
}

inline std::string serialize_config(const RunConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "[geometry]\ngrid_dim = " << c.grid_dim << "\npatch_edge = " << c.patch_edge
     << "\ntruncation = " << c.truncation << "\n[corpus]\ncount = " << c.corpus_count
     << "\nclasses = " << c.classes << "\n[codec]\nK = " << c.codec.K << "\nn_z = " << c.codec.n_z
     << "\nbeta = " << c.codec.beta << "\nlr = " << c.codec.lr << "\nbatch = " << c.codec.batch
     << "\nwarmup_steps = " << c.codec.warmup_steps << "\njoint_steps = " << c.codec.joint_steps
     << "\nkmeans_iters = " << c.codec.kmeans_iters
     << "\nlr_halve_every = " << c.codec.lr_halve_every << "\n[schedule]\nT = " << c.T
     << "\nkind = " << c.schedule_kind << "\n[denoiser]\nchannels = " << c.channels
     << "\nordinary_blocks = " << c.ordinary_blocks << "\nmfm_layers = " << c.mfm_layers
     << "\nheads = " << c.heads << "\nmlp_ratio = " << c.mlp_ratio
     << "\nmfm_pool = " << c.mfm_pool << "\n[training]\nsteps = " << c.train.steps
     << "\nbatch = " << c.train.batch << "\nlr = " << c.train.lr
     << "\nweight_decay = " << c.train.weight_decay << "\nlambda = " << c.train.lambda_aux
     << "\ndropout_p = " << c.train.dropout_p
     << "\nlr_decay_every = " << c.train.lr_decay_every
     << "\nlr_decay_factor = " << c.train.lr_decay_factor
     << "\n[sampling]\nguidance_w = " << c.guidance_w << "\nk_complete = " << c.k_complete
     << "\nk_denoise = " << c.k_denoise << "\nk_edit = " << c.k_edit
     << "\nn_samples = " << c.n_samples << "\nsurface_points = " << c.surface_points
     << "\n[run]\nseed = " << c.seed << "\nthreads = " << c.threads << "\n";
  return os.str();
}

inline uint64_t config_hash(const RunConfig& c) {
  const std::string s = serialize_config(c);
  uint64_t h = 0xcbf29ce484222325ull;
  for (char ch : s) {
    h ^= static_cast<uint8_t>(ch);
    h *= 0x100000001b3ull;
  }
  return h;
}

// Provenance record per run. Wall time varies between runs, so manifests are
// excluded from byte-identity checks.
inline void write_manifest(const std::string& dir, const std::string& command,
                           const RunConfig& config, double wall_seconds) {
  std::filesystem::create_directories(dir);
  std::ofstream os(dir + "/manifest.txt");
  require_data(os.good(), dir + "/manifest.txt: cannot open for writing");
  os << "command = " << command << "\nversion = " << kVersion << "\nconfig_hash = " << std::hex
     << config_hash(config) << std::dec << "\nseed = " << config.seed
     << "\nwall_seconds = " << wall_seconds << "\n";
}

}  // namespace voxdiff
