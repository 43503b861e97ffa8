// Command-line front end: corpus generation, codec and diffusion training,
// sampling in every conditioning mode, metrics, and diagnostics. Every run is
// reproducible from (config, seed) and writes a manifest next to its outputs.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <CLI11.hpp>

#include "voxdiff/voxdiff.hpp"

namespace fs = std::filesystem;
using namespace voxdiff;

namespace {

constexpr uint64_t kNoSeedOverride = ~0ull;

struct Common {
  std::string config_path;
  uint64_t seed = kNoSeedOverride;
  int threads = -1;
  std::string out = "out";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "configuration file (key = value with [sections])");
  cmd->add_option("--seed", c.seed, "root seed; overrides the config");
  cmd->add_option("--threads", c.threads, "worker threads (1 = fully sequential)");
  cmd->add_option("--out", c.out, "output directory");
}

RunConfig effective_config(const Common& c) {
  RunConfig cfg = c.config_path.empty() ? RunConfig{} : load_config(c.config_path);
  if (c.seed != kNoSeedOverride) cfg.seed = c.seed;
  if (c.threads >= 0) cfg.threads = c.threads;
#ifdef _OPENMP
  if (cfg.threads > 0) omp_set_num_threads(cfg.threads);
#endif
  return cfg;
}

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

void require_artifact(const fs::path& p, const std::string& producer) {
  require_data(fs::exists(p), p.string() + ": not found; run `voxdiff " + producer + "` first");
}

std::string shape_name(int i, const char* stem, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%04d.%s", stem, i, ext);
  return buf;
}

// ---------------------------------------------------------------------------
// Corpus directory layout: shape_XXXX.tsdf plus labels.tsv (index, label, kind).
// ---------------------------------------------------------------------------

void write_corpus_dir(const std::string& dir, const std::vector<ShapeSpec>& specs,
                      const std::vector<std::pair<TsdfGrid, int>>& corpus) {
  fs::create_directories(dir);
  std::ofstream labels(dir + "/labels.tsv");
  labels << "index\tlabel\tkind\n";
  for (size_t i = 0; i < corpus.size(); ++i) {
    write_tsdf(dir + "/" + shape_name(static_cast<int>(i), "shape", "tsdf"), corpus[i].first);
    const char* kind = specs[i].kind == ShapeKind::box ? "box"
                       : specs[i].kind == ShapeKind::cylinder ? "cylinder"
                                                              : "union-of-two";
    labels << i << '\t' << corpus[i].second << '\t' << kind << '\n';
  }
}

std::vector<std::pair<TsdfGrid, int>> read_corpus_dir(const std::string& dir) {
  require_artifact(dir, "gen-corpus");
  std::map<int, int> labels;
  {
    std::ifstream ls(dir + "/labels.tsv");
    require_data(ls.good(), dir + "/labels.tsv: not found; run `voxdiff gen-corpus` first");
    std::string header;
    std::getline(ls, header);
    int idx, label;
    std::string kind;
    while (ls >> idx >> label >> kind) labels[idx] = label;
  }
  std::vector<std::pair<TsdfGrid, int>> corpus;
  for (int i = 0;; ++i) {
    const fs::path p = fs::path(dir) / shape_name(i, "shape", "tsdf");
    if (!fs::exists(p)) break;
    const auto it = labels.find(i);
    corpus.emplace_back(read_tsdf(p.string()), it == labels.end() ? -1 : it->second);
  }
  require_data(!corpus.empty(), dir + ": no shape_*.tsdf volumes found");
  return corpus;
}

// ---------------------------------------------------------------------------
// Model directory: codec.ckpt, codebook.cdbk, denoiser.ckpt, denoiser.cfg.
// ---------------------------------------------------------------------------

struct Model {
  CodecParams codec;
  Codebook codebook;
  DenoiserConfig config;
  DenoiserParams denoiser;
  DiffusionSchedule schedule;
};

std::pair<CodecParams, Codebook> load_codec(const std::string& dir) {
  require_artifact(fs::path(dir) / "codec.ckpt", "train-vq");
  require_artifact(fs::path(dir) / "codebook.cdbk", "train-vq");
  return {read_codec_checkpoint(dir + "/codec.ckpt"), read_codebook(dir + "/codebook.cdbk")};
}

Model load_model(const std::string& dir, const RunConfig& cfg) {
  Model m;
  std::tie(m.codec, m.codebook) = load_codec(dir);
  require_artifact(fs::path(dir) / "denoiser.ckpt", "train-diffusion");
  require_artifact(fs::path(dir) / "denoiser.cfg", "train-diffusion");
  m.config = read_denoiser_config(dir + "/denoiser.cfg");
  m.denoiser = init_denoiser(m.config, 0);
  load_checkpoint_into(dir + "/denoiser.ckpt", m.denoiser.all());
  m.schedule = build_schedule(m.config.T, m.config.K, cfg.schedule_kind);
  return m;
}

void write_loss_curve(const std::string& path, const std::vector<double>& curve) {
  std::ofstream os(path);
  os << "step\tloss\n";
  os.precision(12);
  for (size_t i = 0; i < curve.size(); ++i) os << i << '\t' << curve[i] << '\n';
}

FractionBox parse_region(const std::string& text) {
  FractionBox box;
  if (text.empty()) return box;
  std::istringstream is(text);
  std::string clause;
  while (std::getline(is, clause, ',')) {
    std::istringstream cs(clause);
    std::string axis, lo, hi;
    std::getline(cs, axis, ':');
    std::getline(cs, lo, ':');
    std::getline(cs, hi, ':');
    require(axis.size() == 1 && axis[0] >= 'x' && axis[0] <= 'z' && !lo.empty() && !hi.empty(),
            "region clause must look like z:0:0.5");
    const int d = axis[0] - 'x';
    box.lo[d] = std::stod(lo);
    box.hi[d] = std::stod(hi);
    require(box.lo[d] >= 0.0 && box.hi[d] <= 1.0 && box.lo[d] < box.hi[d],
            "region fractions must satisfy 0 <= lo < hi <= 1");
  }
  return box;
}

std::vector<std::string> tsdf_files_in(const std::string& dir) {
  require_data(fs::exists(dir), dir + ": directory not found");
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".tsdf") files.push_back(e.path().string());
  std::sort(files.begin(), files.end());
  require_data(!files.empty(), dir + ": no .tsdf volumes found");
  return files;
}

void emit_report(const std::string& out_dir, const std::vector<MetricReport>& reports) {
  fs::create_directories(out_dir);
  std::ofstream table(out_dir + "/report.tsv");
  table << "metric\tvalue\tparams\n";
  for (const auto& r : reports) {
    const std::string line = format_metric_line(r);
    std::cout << line << "\n";
    table << line << "\n";
  }
}

DenoiserConfig denoiser_config_from(const RunConfig& cfg, int K, const Dims3& patch_grid) {
  DenoiserConfig d;
  d.channels = cfg.channels;
  d.ordinary_blocks = cfg.ordinary_blocks;
  d.mfm_layers = cfg.mfm_layers;
  d.heads = cfg.heads;
  d.mlp_ratio = cfg.mlp_ratio;
  d.mfm_pool = cfg.mfm_pool;
  d.num_classes = cfg.classes + 1;
  d.condition_mode = DenoiserConfig::Condition::class_label;
  d.K = K;
  d.patch_grid = patch_grid;
  d.T = cfg.T;
  return d;
}

// ---------------------------------------------------------------------------
// Commands.
// ---------------------------------------------------------------------------

int cmd_gen_corpus(const Common& common, int count, int classes, int64_t grid_dim) {
  Timer timer;
  RunConfig cfg = effective_config(common);
  if (count > 0) cfg.corpus_count = count;
  if (classes > 0) cfg.classes = classes;
  if (grid_dim > 0) cfg.grid_dim = grid_dim;
  const Dims3 dims{cfg.grid_dim, cfg.grid_dim, cfg.grid_dim};
  const auto specs = make_corpus_specs(cfg.corpus_count, cfg.classes,
                                       derive_seed(cfg.seed, "gen-corpus"));
  std::vector<std::pair<TsdfGrid, int>> corpus;
  for (const auto& spec : specs)
    corpus.emplace_back(generate_shape(spec, dims, cfg.truncation, cfg.patch_edge),
                        spec.class_label);
  write_corpus_dir(common.out, specs, corpus);
  write_manifest(common.out, "gen-corpus", cfg, timer.seconds());
  std::cout << "wrote " << corpus.size() << " volumes to " << common.out << "\n";
  return 0;
}

int cmd_train_vq(const Common& common, const std::string& corpus_dir) {
  Timer timer;
  RunConfig cfg = effective_config(common);
  auto corpus = read_corpus_dir(corpus_dir);
  TrainedCodec tc = train_codec(corpus, cfg.patch_edge, cfg.codec, derive_seed(cfg.seed, "train-vq"));
  fs::create_directories(common.out);
  write_checkpoint(common.out + "/codec.ckpt", tc.params.all());
  write_codebook(common.out + "/codebook.cdbk", tc.codebook);
  write_loss_curve(common.out + "/vq_loss.tsv", tc.loss_curve);
  const double err = codec_reconstruction_error(corpus, tc.params, tc.codebook);
  const double util = codebook_utilization(corpus, tc.params, tc.codebook);
  std::cout << format_metric_line({"vq-recon-mae", err, "corpus=" + corpus_dir}) << "\n"
            << format_metric_line({"codebook-utilization", util,
                                   "K=" + std::to_string(tc.codebook.K)})
            << "\n";
  write_manifest(common.out, "train-vq", cfg, timer.seconds());
  return 0;
}

int cmd_tokenize(const Common& common, const std::string& corpus_dir,
                 const std::string& model_dir) {
  Timer timer;
  RunConfig cfg = effective_config(common);
  auto [codec, codebook] = load_codec(model_dir);
  auto corpus = read_corpus_dir(corpus_dir);
  fs::create_directories(common.out);
  for (size_t i = 0; i < corpus.size(); ++i) {
    TokenMap map = tokenize(corpus[i].first, codec, codebook, corpus[i].second);
    write_tokens(common.out + "/" + shape_name(static_cast<int>(i), "shape", "tokm"), map,
                 codebook.K);
  }
  write_manifest(common.out, "tokenize", cfg, timer.seconds());
  std::cout << "tokenized " << corpus.size() << " volumes\n";
  return 0;
}

std::vector<TokenMap> read_token_dir(const std::string& dir, int64_t edge, int* K_out) {
  require_artifact(dir, "tokenize");
  std::vector<TokenMap> maps;
  int K = 0;
  for (int i = 0;; ++i) {
    const fs::path p = fs::path(dir) / shape_name(i, "shape", "tokm");
    if (!fs::exists(p)) break;
    TokenFile tf = read_tokens(p.string(), edge);
    K = tf.K;
    maps.push_back(std::move(tf.map));
  }
  require_data(!maps.empty(), dir + ": no shape_*.tokm maps found; run `voxdiff tokenize` first");
  if (K_out) *K_out = K;
  return maps;
}

int cmd_train_diffusion(const Common& common, const std::string& tokens_dir,
                        const std::string& model_dir) {
  Timer timer;
  RunConfig cfg = effective_config(common);
  auto [codec, codebook] = load_codec(model_dir);
  int K = 0;
  auto maps = read_token_dir(tokens_dir, codec.edge, &K);
  require_data(K == codebook.K, "token maps and codebook disagree on K");
  DenoiserConfig dcfg = denoiser_config_from(cfg, K, maps[0].patch_spec.per_axis);
  DiffusionSchedule schedule = build_schedule(dcfg.T, K, cfg.schedule_kind);
  TrainedDenoiser td =
      train_denoiser(maps, dcfg, schedule, cfg.train, derive_seed(cfg.seed, "train-diffusion"));
  fs::create_directories(common.out);
  write_checkpoint(common.out + "/denoiser.ckpt", td.params.all());
  write_denoiser_config(common.out + "/denoiser.cfg", dcfg);
  write_loss_curve(common.out + "/diffusion_loss.tsv", td.loss_curve);
  std::cout << format_metric_line({"diffusion-loss-tail", smoothed_tail_loss(td.loss_curve),
                                   "steps=" + std::to_string(cfg.train.steps)})
            << "\n";
  write_manifest(common.out, "train-diffusion", cfg, timer.seconds());
  return 0;
}

int cmd_sample(const Common& common, const std::string& model_dir, int count, int label) {
  Timer timer;
  RunConfig cfg = effective_config(common);
  Model m = load_model(model_dir, cfg);
  fs::create_directories(common.out);
  for (int i = 0; i < count; ++i) {
    ConditionSpec spec = ConditionSpec::for_mode(label >= 0
                                                     ? ConditionSpec::Mode::class_conditional
                                                     : ConditionSpec::Mode::unconditional);
    spec.class_label = label;
    spec.guidance_w = cfg.guidance_w;
    spec.seed = derive_seed(cfg.seed, "sample", i);
    TsdfGrid grid = sample_unconditional(m.denoiser, m.schedule, m.codec, m.codebook,
                                         cfg.truncation, spec);
    write_tsdf(common.out + "/" + shape_name(i, "sample", "tsdf"), grid);
  }
  write_manifest(common.out, "sample", cfg, timer.seconds());
  std::cout << "wrote " << count << " samples to " << common.out << "\n";
  return 0;
}

int cmd_complete(const Common& common, const std::string& model_dir, const std::string& input,
                 const std::string& region, int count, int label) {
  Timer timer;
  RunConfig cfg = effective_config(common);
  Model m = load_model(model_dir, cfg);
  TsdfGrid partial = read_tsdf(input);
  const PatchSpec pspec = PatchSpec::for_grid(partial.dims, m.codec.edge);
  const auto observed = observed_patches_from_box(pspec, parse_region(region));
  ConditionSpec spec = ConditionSpec::for_mode(ConditionSpec::Mode::completion);
  spec.start_fraction = cfg.k_complete;
  spec.class_label = label;
  spec.guidance_w = cfg.guidance_w;
  spec.n_samples = count;
  spec.seed = derive_seed(cfg.seed, "complete");
  auto grids = complete(partial, observed, m.denoiser, m.schedule, m.codec, m.codebook, spec);
  fs::create_directories(common.out);
  for (size_t i = 0; i < grids.size(); ++i)
    write_tsdf(common.out + "/" + shape_name(static_cast<int>(i), "completion", "tsdf"),
               grids[i]);
  write_manifest(common.out, "complete", cfg, timer.seconds());
  std::cout << "wrote " << grids.size() << " completions to " << common.out << "\n";
  return 0;
}

int cmd_denoise(const Common& common, const std::string& model_dir, const std::string& input) {
  Timer timer;
  RunConfig cfg = effective_config(common);
  Model m = load_model(model_dir, cfg);
  TsdfGrid noisy = read_tsdf(input);
  ConditionSpec spec = ConditionSpec::for_mode(ConditionSpec::Mode::denoise);
  spec.start_fraction = cfg.k_denoise;
  spec.seed = derive_seed(cfg.seed, "denoise");
  TsdfGrid out = denoise_grid(noisy, m.denoiser, m.schedule, m.codec, m.codebook, spec);
  fs::create_directories(common.out);
  write_tsdf(common.out + "/denoised.tsdf", out);
  write_manifest(common.out, "denoise", cfg, timer.seconds());
  std::cout << "wrote " << common.out << "/denoised.tsdf\n";
  return 0;
}

int cmd_edit(const Common& common, const std::string& model_dir, const std::string& input,
             int label) {
  Timer timer;
  RunConfig cfg = effective_config(common);
  Model m = load_model(model_dir, cfg);
  TokenFile tf = read_tokens(input, m.codec.edge);
  require_data(tf.K == m.codebook.K, input + ": token map K does not match the codebook");
  ConditionSpec spec = ConditionSpec::for_mode(ConditionSpec::Mode::edit);
  spec.start_fraction = cfg.k_edit;
  spec.guidance_w = cfg.guidance_w;
  spec.seed = derive_seed(cfg.seed, "edit");
  TokenMap edited = edit_tokens(tf.map, label, m.denoiser, m.schedule, spec);
  fs::create_directories(common.out);
  write_tokens(common.out + "/edited.tokm", edited, m.codebook.K);
  write_tsdf(common.out + "/edited.tsdf", detokenize(edited, m.codec, m.codebook, cfg.truncation));
  write_manifest(common.out, "edit", cfg, timer.seconds());
  std::cout << "wrote " << common.out << "/edited.tsdf\n";
  return 0;
}

int cmd_eval(const Common& common, const std::string& generated_dir,
             const std::string& reference_dir, const std::string& distance) {
  Timer timer;
  RunConfig cfg = effective_config(common);
  const auto load_sets = [&](const std::string& dir, const char* tag) {
    std::vector<SurfacePointSet> sets;
    int i = 0;
    for (const auto& f : tsdf_files_in(dir))
      sets.push_back(sample_surface_points(read_tsdf(f), cfg.surface_points,
                                           derive_seed(cfg.seed, tag, i++)));
    return sets;
  };
  const auto gen = load_sets(generated_dir, "eval-gen");
  const auto ref = load_sets(reference_dir, "eval-ref");
  const std::string params = "n_g=" + std::to_string(gen.size()) +
                             ",n_r=" + std::to_string(ref.size()) +
                             ",points=" + std::to_string(cfg.surface_points);
  std::vector<MetricReport> reports;
  if (distance == "cd" || distance == "both")
    reports.push_back({"1-nna-cd", one_nna(gen, ref, DistanceKind::chamfer), params});
  if (distance == "emd" || distance == "both")
    reports.push_back({"1-nna-emd", one_nna(gen, ref, DistanceKind::emd), params});
  double global_mmd = 0.0;
  for (const auto& r : ref) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& g : gen) best = std::min(best, chamfer(g, r));
    global_mmd += best;
  }
  reports.push_back({"mmd-cd", global_mmd / static_cast<double>(ref.size()), params});
  emit_report(common.out, reports);
  write_manifest(common.out, "eval", cfg, timer.seconds());
  return 0;
}

int cmd_spectrum(const Common& common, const std::string& input) {
  Timer timer;
  RunConfig cfg = effective_config(common);
  std::vector<std::string> files;
  if (fs::is_directory(input)) files = tsdf_files_in(input);
  else files.push_back(input);
  std::vector<double> mean_power;
  for (const auto& f : files) {
    DctPsd psd = dct_psd(read_tsdf(f));
    const double drift =
        std::fabs(psd.total_power - psd.input_energy) / std::max(psd.input_energy, 1e-30);
    require_data(drift < 1e-9, f + ": Parseval check failed");
    if (mean_power.size() < psd.band_power.size()) mean_power.resize(psd.band_power.size(), 0.0);
    for (size_t b = 0; b < psd.band_power.size(); ++b) mean_power[b] += psd.band_power[b];
  }
  for (auto& p : mean_power) p /= static_cast<double>(files.size());
  std::vector<MetricReport> reports;
  for (size_t b = 0; b < mean_power.size(); ++b)
    reports.push_back({"psd-band-" + std::to_string(b), mean_power[b],
                       "volumes=" + std::to_string(files.size())});
  fs::create_directories(common.out);
  {
    std::ofstream os(common.out + "/spectrum.tsv");
    os << "band\tmean_power\n";
    os.precision(12);
    for (size_t b = 0; b < mean_power.size(); ++b) os << b << '\t' << mean_power[b] << '\n';
  }
  for (const auto& r : reports) std::cout << format_metric_line(r) << "\n";
  write_manifest(common.out, "spectrum", cfg, timer.seconds());
  return 0;
}

int cmd_schedule(const Common& common, int T, int K, const std::string& kind) {
  Timer timer;
  RunConfig cfg = effective_config(common);
  if (T > 0) cfg.T = T;
  if (K > 0) cfg.codec.K = K;
  if (!kind.empty()) cfg.schedule_kind = kind;
  DiffusionSchedule s = build_schedule(cfg.T, cfg.codec.K, cfg.schedule_kind);
  fs::create_directories(common.out);
  std::ofstream(common.out + "/schedule.tsv") << dump_schedule(s);
  write_manifest(common.out, "schedule", cfg, timer.seconds());
  std::cout << "wrote " << common.out << "/schedule.tsv\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"voxdiff: discrete diffusion over tokenized signed-distance volumes"};
  app.require_subcommand(1);

  Common common;
  int count = 0, classes = 0, label = -1, n = 1, T = 0, K = 0;
  int64_t grid_dim = 0;
  std::string corpus_dir = "out", model_dir = "out", tokens_dir = "out/tokens";
  std::string input, region, generated_dir, reference_dir, distance = "cd", kind;

  auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic T-SDF corpus");
  add_common(gen, common);
  gen->add_option("--count", count, "number of shapes");
  gen->add_option("--classes", classes, "number of classes");
  gen->add_option("--grid-dim", grid_dim, "cubic grid resolution");

  auto* vq = app.add_subcommand("train-vq", "train the patch codec and codebook");
  add_common(vq, common);
  vq->add_option("--corpus", corpus_dir, "corpus directory");

  auto* tok = app.add_subcommand("tokenize", "quantize a corpus into token maps");
  add_common(tok, common);
  tok->add_option("--corpus", corpus_dir, "corpus directory");
  tok->add_option("--model", model_dir, "directory holding codec.ckpt + codebook.cdbk");

  auto* diff = app.add_subcommand("train-diffusion", "train the denoising transformer");
  add_common(diff, common);
  diff->add_option("--tokens", tokens_dir, "token map directory");
  diff->add_option("--model", model_dir, "model directory (codec inputs, denoiser outputs)");

  auto* smp = app.add_subcommand("sample", "unconditional or class-conditional generation");
  add_common(smp, common);
  smp->add_option("--model", model_dir, "model directory");
  smp->add_option("--count", n, "number of samples");
  smp->add_option("--label", label, "class label (omit for unconditional)");

  auto* cmp = app.add_subcommand("complete", "complete a partial volume");
  add_common(cmp, common);
  cmp->add_option("--model", model_dir, "model directory");
  cmp->add_option("--input", input, "partial volume (.tsdf)")->required();
  cmp->add_option("--region", region, "observed region, e.g. z:0:0.5");
  cmp->add_option("--count", n, "number of completions");
  cmp->add_option("--label", label, "class label (optional)");

  auto* den = app.add_subcommand("denoise", "denoise a corrupted volume");
  add_common(den, common);
  den->add_option("--model", model_dir, "model directory");
  den->add_option("--input", input, "noisy volume (.tsdf)")->required();

  auto* edt = app.add_subcommand("edit", "re-generate a token map under a new label");
  add_common(edt, common);
  edt->add_option("--model", model_dir, "model directory");
  edt->add_option("--input", input, "token map (.tokm)")->required();
  edt->add_option("--label", label, "target class label")->required();

  auto* evl = app.add_subcommand("eval", "compare generated and reference volumes");
  add_common(evl, common);
  evl->add_option("--generated", generated_dir, "generated volume directory")->required();
  evl->add_option("--reference", reference_dir, "reference volume directory")->required();
  evl->add_option("--distance", distance, "cd, emd, or both");

  auto* spc = app.add_subcommand("spectrum", "DCT power spectral density");
  add_common(spc, common);
  spc->add_option("--input", input, "volume file or directory")->required();

  auto* sch = app.add_subcommand("schedule", "dump the diffusion schedule table");
  add_common(sch, common);
  sch->add_option("--T", T, "timestep count");
  sch->add_option("--K", K, "category count");
  sch->add_option("--kind", kind, "schedule kind");

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return cmd_gen_corpus(common, count, classes, grid_dim);
    if (vq->parsed()) return cmd_train_vq(common, corpus_dir);
    if (tok->parsed()) return cmd_tokenize(common, corpus_dir, model_dir);
    if (diff->parsed()) return cmd_train_diffusion(common, tokens_dir, model_dir);
    if (smp->parsed()) return cmd_sample(common, model_dir, n, label);
    if (cmp->parsed()) return cmd_complete(common, model_dir, input, region, n, label);
    if (den->parsed()) return cmd_denoise(common, model_dir, input);
    if (edt->parsed()) return cmd_edit(common, model_dir, input, label);
    if (evl->parsed()) return cmd_eval(common, generated_dir, reference_dir, distance);
    if (spc->parsed()) return cmd_spectrum(common, input);
    if (sch->parsed()) return cmd_schedule(common, T, K, kind);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
