#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "voxdiff/io.hpp"

using namespace voxdiff;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("voxdiff_test_" + std::to_string(mix64(reinterpret_cast<uintptr_t>(this))));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

TsdfGrid make_grid(uint64_t seed) {
  TsdfGrid g;
  g.dims = {4, 6, 8};
  g.truncation = 0.2f;
  g.values.resize(g.numel());
  Rng rng(seed);
  // values representable exactly in f32 so round trips are bitwise
  for (auto& v : g.values) v = static_cast<float>(rng.uniform(-0.2, 0.2));
  return g;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

}  // namespace

TEST(TsdfFile, RoundTrip) {
  TempDir tmp;
  TsdfGrid g = make_grid(1);
  write_tsdf(tmp.file("a.tsdf"), g);
  TsdfGrid r = read_tsdf(tmp.file("a.tsdf"));
  EXPECT_EQ(r.dims, g.dims);
  EXPECT_EQ(r.values, g.values);
  EXPECT_FLOAT_EQ(r.truncation, g.truncation);
}

TEST(TsdfFile, BadMagicNamesFileAndExpectation) {
  TempDir tmp;
  std::ofstream(tmp.file("bad.tsdf"), std::ios::binary) << "NOPE!rest";
  try {
    read_tsdf(tmp.file("bad.tsdf"));
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("bad.tsdf"), std::string::npos);
    EXPECT_NE(msg.find("TSDF1"), std::string::npos);
  }
}

TEST(TsdfFile, TruncatedPayloadRejected) {
  TempDir tmp;
  TsdfGrid g = make_grid(2);
  write_tsdf(tmp.file("t.tsdf"), g);
  const std::string full = slurp(tmp.file("t.tsdf"));
  std::ofstream(tmp.file("cut.tsdf"), std::ios::binary)
      << full.substr(0, full.size() - 7);
  EXPECT_THROW(read_tsdf(tmp.file("cut.tsdf")), DataError);
}

TEST(CodebookFile, RoundTrip) {
  TempDir tmp;
  Codebook cb;
  cb.K = 4;
  cb.n_z = 3;
  Rng rng(3);
  cb.entries.resize(12);
  for (auto& v : cb.entries) v = static_cast<float>(rng.uniform(-1, 1));
  write_codebook(tmp.file("c.cdbk"), cb);
  Codebook r = read_codebook(tmp.file("c.cdbk"));
  EXPECT_EQ(r.K, 4);
  EXPECT_EQ(r.n_z, 3);
  EXPECT_EQ(r.entries, cb.entries);
}

TEST(TokenFile, RoundTripWithLabelAndWithout) {
  TempDir tmp;
  TokenMap m;
  m.patch_spec = PatchSpec{4, {2, 3, 4}};
  m.indices.resize(m.patch_spec.count());
  for (size_t i = 0; i < m.indices.size(); ++i) m.indices[i] = static_cast<int>(i % 7);
  m.class_label = 2;
  write_tokens(tmp.file("t.tokm"), m, 8);
  TokenFile r = read_tokens(tmp.file("t.tokm"), 4);
  EXPECT_EQ(r.K, 8);
  EXPECT_EQ(r.map.class_label, 2);
  EXPECT_EQ(r.map.indices, m.indices);
  EXPECT_EQ(r.map.patch_spec, m.patch_spec);

  m.class_label = -1;
  write_tokens(tmp.file("n.tokm"), m, 8);
  EXPECT_EQ(read_tokens(tmp.file("n.tokm"), 4).map.class_label, -1);
}

TEST(TokenFile, RejectsOutOfRangeIndex) {
  TempDir tmp;
  TokenMap m;
  m.patch_spec = PatchSpec{4, {1, 1, 2}};
  m.indices = {0, 9};
  write_tokens(tmp.file("bad.tokm"), m, 8);  // index 9 > K = 8
  EXPECT_THROW(read_tokens(tmp.file("bad.tokm"), 4), DataError);
}

TEST(CheckpointFile, RoundTripNamedTensors) {
  TempDir tmp;
  Tensor a = Tensor::param({2, 3}, {1, 2, 3, 4, 5, 6}, "m.a");
  Tensor b = Tensor::param({4}, {0.5, -0.5, 0.25, 0}, "m.b");
  write_checkpoint(tmp.file("w.ckpt"), {a, b});
  Tensor a2 = Tensor::param({2, 3}, std::vector<real>(6, 0), "m.a");
  Tensor b2 = Tensor::param({4}, std::vector<real>(4, 0), "m.b");
  load_checkpoint_into(tmp.file("w.ckpt"), {a2, b2});
  EXPECT_EQ(a2.value(), a.value());
  EXPECT_EQ(b2.value(), b.value());
}

TEST(CheckpointFile, MissingTensorRejected) {
  TempDir tmp;
  Tensor a = Tensor::param({2}, {1, 2}, "m.a");
  write_checkpoint(tmp.file("w.ckpt"), {a});
  Tensor other = Tensor::param({2}, {0, 0}, "m.zzz");
  EXPECT_THROW(load_checkpoint_into(tmp.file("w.ckpt"), {other}), DataError);
}

TEST(CheckpointFile, CodecGeometryRecovered) {
  TempDir tmp;
  CodecParams p = init_codec_params(4, 16, 9);
  write_checkpoint(tmp.file("codec.ckpt"), p.all());
  CodecParams r = read_codec_checkpoint(tmp.file("codec.ckpt"));
  EXPECT_EQ(r.edge, 4);
  EXPECT_EQ(r.n_z, 16);
  for (size_t i = 0; i < p.all().size(); ++i) {
    const auto& pv = p.all()[i].value();
    const auto& rv = r.all()[i].value();
    ASSERT_EQ(pv.size(), rv.size());
    for (size_t j = 0; j < pv.size(); ++j)
      EXPECT_NEAR(pv[j], rv[j], 1e-7);  // f32 storage
  }
}

TEST(DenoiserConfigFile, RoundTrip) {
  TempDir tmp;
  DenoiserConfig c = DenoiserConfig::desk_scale();
  c.num_classes = 4;
  c.condition_mode = DenoiserConfig::Condition::class_label;
  write_denoiser_config(tmp.file("d.cfg"), c);
  DenoiserConfig r = read_denoiser_config(tmp.file("d.cfg"));
  EXPECT_EQ(r.channels, c.channels);
  EXPECT_EQ(r.ordinary_blocks, c.ordinary_blocks);
  EXPECT_EQ(r.mfm_layers, c.mfm_layers);
  EXPECT_EQ(r.patch_grid, c.patch_grid);
  EXPECT_EQ(r.T, c.T);
  EXPECT_EQ(condition_mode_name(r.condition_mode), "class");
}

TEST(RunConfigParse, DefaultsMatchDeskScale) {
  RunConfig c = parse_config_text("");
  EXPECT_EQ(c.grid_dim, 16);
  EXPECT_EQ(c.patch_edge, 4);
  EXPECT_DOUBLE_EQ(c.truncation, 0.2);
  EXPECT_EQ(c.codec.K, 32);
  EXPECT_EQ(c.codec.n_z, 32);
  EXPECT_DOUBLE_EQ(c.codec.beta, 0.25);
  EXPECT_EQ(c.T, 25);
  EXPECT_EQ(c.channels, 64);
  EXPECT_EQ(c.ordinary_blocks, 4);
  EXPECT_EQ(c.mfm_layers, 3);
  EXPECT_DOUBLE_EQ(c.train.lambda_aux, 1e-3);
  EXPECT_DOUBLE_EQ(c.train.dropout_p, 0.5);
  EXPECT_DOUBLE_EQ(c.guidance_w, 0.5);
  EXPECT_DOUBLE_EQ(c.k_complete, 0.5);
  EXPECT_DOUBLE_EQ(c.k_edit, 0.98);
}

TEST(RunConfigParse, SectionsAndComments) {
  RunConfig c = parse_config_text(
      "# comment\n[schedule]\nT = 50\nkind = mask-only\n[training]\nsteps = 7\n");
  EXPECT_EQ(c.T, 50);
  EXPECT_EQ(c.schedule_kind, "mask-only");
  EXPECT_EQ(c.train.steps, 7);
}

TEST(RunConfigParse, UnknownKeyIsError) {
  EXPECT_THROW(parse_config_text("[schedule]\nTt = 50\n"), DataError);
  EXPECT_THROW(parse_config_text("loose_key = 1\n"), DataError);
  EXPECT_THROW(parse_config_text("[schedule]\nT\n"), DataError);
}

TEST(RunConfigParse, HashChangesWithContent) {
  RunConfig a = parse_config_text("");
  RunConfig b = parse_config_text("[schedule]\nT = 50\n");
  EXPECT_NE(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a), config_hash(parse_config_text("")));
}

// ---------------------------------------------------------------------------
// CLI integration.
// ---------------------------------------------------------------------------

namespace {

int run_cli(const std::string& args, std::string* output = nullptr) {
  const std::string cmd = std::string(VOXDIFF_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  EXPECT_NE(pipe, nullptr);
  std::string out;
  char buf[4096];
  while (size_t n = fread(buf, 1, sizeof(buf), pipe)) out.append(buf, n);
  const int status = pclose(pipe);
  if (output) *output = out;
  return WEXITSTATUS(status);
}

std::vector<std::pair<std::string, std::string>> dir_contents(const fs::path& dir) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).string();
    if (rel == "manifest.txt") continue;  // carries wall time
    out.emplace_back(rel, slurp(e.path().string()));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST(Cli, GenCorpusIsByteIdentical) {
  TempDir tmp;
  const std::string a = tmp.file("a"), b = tmp.file("b");
  ASSERT_EQ(run_cli("gen-corpus --count 6 --classes 2 --grid-dim 8 --seed 1 --out " + a), 0);
  ASSERT_EQ(run_cli("gen-corpus --count 6 --classes 2 --grid-dim 8 --seed 1 --out " + b), 0);
  const auto ca = dir_contents(a), cb = dir_contents(b);
  ASSERT_FALSE(ca.empty());
  EXPECT_EQ(ca, cb);
}

TEST(Cli, SampleWithoutCheckpointNamesProducer) {
  TempDir tmp;
  std::string out;
  // nothing trained at all: the first missing artifact is the codec
  int rc = run_cli("sample --model " + tmp.file("missing") + " --out " + tmp.file("s"), &out);
  EXPECT_EQ(rc, 2);
  EXPECT_NE(out.find("train-vq"), std::string::npos);
  // codec present, denoiser missing: points at train-diffusion
  CodecParams p = init_codec_params(4, 8, 1);
  write_checkpoint(tmp.file("codec.ckpt"), p.all());
  Codebook cb;
  cb.K = 4;
  cb.n_z = 8;
  cb.entries.assign(32, 0.0);
  write_codebook(tmp.file("codebook.cdbk"), cb);
  rc = run_cli("sample --model " + tmp.path.string() + " --out " + tmp.file("s"), &out);
  EXPECT_EQ(rc, 2);
  EXPECT_NE(out.find("train-diffusion"), std::string::npos);
}

TEST(Cli, UnknownFlagIsUsageError) {
  std::string out;
  EXPECT_EQ(run_cli("gen-corpus --bogus 3", &out), 1);
}

TEST(Cli, BadMagicIsDataError) {
  TempDir tmp;
  std::ofstream(tmp.file("junk.tsdf"), std::ios::binary) << "JUNK!data";
  std::string out;
  const int rc = run_cli("spectrum --input " + tmp.file("junk.tsdf") + " --out " + tmp.file("o"),
                         &out);
  EXPECT_EQ(rc, 2);
  EXPECT_NE(out.find("TSDF1"), std::string::npos);
}

TEST(Cli, ScheduleDumpRuns) {
  TempDir tmp;
  std::string out;
  const int rc = run_cli("schedule --T 5 --K 4 --out " + tmp.file("sched"), &out);
  EXPECT_EQ(rc, 0);
  EXPECT_TRUE(fs::exists(tmp.file("sched") + "/schedule.tsv"));
}
