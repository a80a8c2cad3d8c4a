// poredit command-line front end.
//
// Exit codes: 0 success, 1 validation failure, 2 runtime failure,
// 3 acceptance criterion failure (repro-desk). Failures print one JSON line
// {"error": "validation"|"runtime", "reason": ...} on stderr.

#include <CLI11.hpp>
#include <json.hpp>

#include "acceptance/criteria.hpp"
#include "poredit/poredit.hpp"

using namespace poredit;
namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ValidationError("cannot open for writing: " + p.string());
  out << text;
  if (!out) throw RuntimeFailure("write failed: " + p.string());
}

void save_volume(const BinaryVolume& v, const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  write_volume(v, p);
}

void write_json(const ojson& j, const fs::path& p) { write_text(p, j.dump(2) + "\n"); }

void emit(const ojson& j, const std::string& report) {
  if (!report.empty()) write_json(j, report);
  std::cout << j.dump(2) << std::endl;
}

ojson dims_json(const Dims& d) { return ojson::array({d.d, d.h, d.w}); }

RunConfig base_config(const std::string& path) { return path.empty() ? desk_config() : load_run_config(path); }

template <class T, class U>
void override_with(const std::optional<T>& flag, U& field) {
  if (flag) field = static_cast<U>(*flag);
}

std::string with_suffix(const fs::path& p, const std::string& suffix) {
  fs::path out = p;
  out.replace_extension(suffix);
  return out.string();
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::optional<int> count;
  std::optional<std::size_t> size;
  std::optional<double> porosity, corr_len, spread;
  std::uint64_t seed = 0;
  std::string out;
};

void run_synth(const SynthArgs& a, const std::string& config) {
  RunConfig rc = base_config(config);
  override_with(a.count, rc.synth.count);
  override_with(a.size, rc.synth.spec.size);
  override_with(a.porosity, rc.synth.spec.porosity);
  override_with(a.corr_len, rc.synth.spec.corr_len);
  override_with(a.spread, rc.synth.porosity_spread);
  SynthSpec spec = rc.synth.spec;
  spec.seed = a.seed;
  spec.validate();
  rc.synth.spec.validate();
  if (rc.synth.count < 1) throw ValidationError("synth: count must be >= 1");
  if (rc.synth.porosity_spread < 0 || spec.porosity - 0.5 * rc.synth.porosity_spread <= 0 ||
      spec.porosity + 0.5 * rc.synth.porosity_spread >= 1)
    throw ValidationError("synth: porosity spread leaves (0,1)");
  const auto vols = synth_ensemble(spec, rc.synth.count, rc.synth.porosity_spread, a.seed);
  fs::create_directories(a.out);
  ojson list = ojson::array();
  for (std::size_t i = 0; i < vols.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "synth_%03zu.pdtv", i);
    write_volume(vols[i], fs::path(a.out) / name);
    list.push_back({{"file", name}, {"porosity", vols[i].porosity()}});
  }
  ojson j;
  j["command"] = "synth";
  j["out"] = a.out;
  j["count"] = rc.synth.count;
  j["size"] = spec.size;
  j["porosity"] = spec.porosity;
  j["porosity_spread"] = rc.synth.porosity_spread;
  j["corr_len"] = spec.corr_len;
  j["seed"] = a.seed;
  j["volumes"] = list;
  emit(j, "");
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string data, out, log;
  std::uint64_t seed = 0;
  std::optional<long long> steps;
  std::optional<int> epochs;
};

void run_train(const TrainArgs& a, const std::string& config) {
  RunConfig rc = base_config(config);
  override_with(a.steps, rc.train.max_steps);
  override_with(a.epochs, rc.train.epochs);
  rc.train.seed = a.seed;
  rc.validate();
  const Dataset ds = load_dataset(a.data);
  Model<float> model(rc.model, a.seed);
  const auto res = train(model, ds, rc.train, rc.loss);
  CheckpointMeta meta{rc.train.diffusion_steps, rc.train.s_offset, {}};
  if (rc.model.s2_features > 0) meta.s2_lags = clip_lags(std::size_t(rc.model.input_size));
  save_checkpoint(model, meta, a.out);
  const std::string log = a.log.empty() ? with_suffix(a.out, ".train.csv") : a.log;
  write_epoch_csv(res.epochs, log);
  ojson j;
  j["command"] = "train";
  j["checkpoint"] = a.out;
  j["log"] = log;
  j["dataset_size"] = ds.size();
  j["parameters"] = model.parameter_count();
  j["seed"] = a.seed;
  j["samples_seen"] = res.step_losses.size();
  j["optimizer_steps"] = (res.step_losses.size() + rc.train.batch - 1) / rc.train.batch;
  j["epochs"] = res.epochs.size();
  j["first_epoch_loss"] = res.epochs.empty() ? 0.0 : res.epochs.front().loss;
  j["final_epoch_loss"] = res.epochs.empty() ? 0.0 : res.epochs.back().loss;
  j["porosity_stats"] = {{"mean", model.porosity_stats().mean}, {"std", model.porosity_stats().std}};
  j["config"] = run_config_json(rc);
  emit(j, "");
}

// ---------------------------------------------------------------------------
// sample / sample-tiled

struct SampleArgs {
  std::string ckpt, out, report, s2_cond, mode, noise;
  std::optional<double> porosity, eta, cfg;
  std::optional<int> steps;
  std::optional<std::size_t> size, tile, overlap;
  std::uint64_t seed = 0;
};

std::vector<double> load_s2_condition(const std::string& path, const std::vector<std::size_t>& lags) {
  if (fs::path(path).extension() == ".pdtv") return s2_at_lags(read_volume(path), lags);
  if (!fs::exists(path)) throw ValidationError("file not found: " + path);
  nlohmann::json j;
  try {
    std::ifstream in(path);
    j = nlohmann::json::parse(in);
    if (j.contains("s2_shift")) j = j["s2_shift"];
    const auto got = j.at("lags").get<std::vector<std::size_t>>();
    if (got != lags) throw ValidationError("s2-cond: lags in " + path + " differ from the checkpoint lags");
    auto values = j.at("values").get<std::vector<double>>();
    if (values.size() != lags.size()) throw ValidationError("s2-cond: value count differs from lag count");
    return values;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("s2-cond: malformed " + path + ": " + e.what());
  }
}

struct Prepared {
  LoadedModel<float> loaded;
  RunConfig rc;
  Condition cond;
  NoiseSchedule sched;
  SamplerSpec spec;
};

Prepared prepare_sampling(const SampleArgs& a, const std::string& config) {
  RunConfig rc = base_config(config);
  override_with(a.porosity, rc.sample.porosity);
  override_with(a.eta, rc.sample.eta);
  override_with(a.cfg, rc.sample.cfg_scale);
  override_with(a.steps, rc.sample.steps);
  if (!a.mode.empty()) rc.sample.mode = parse_sampler_mode(a.mode);
  rc.sample.validate();
  auto loaded = load_checkpoint<float>(a.ckpt);
  if (rc.sample.steps > loaded.meta.diffusion_steps)
    throw ValidationError("sample: steps " + std::to_string(rc.sample.steps) + " exceed the checkpoint schedule length " +
                          std::to_string(loaded.meta.diffusion_steps));
  Condition cond;
  cond.phi = rc.sample.porosity;
  const int s2 = loaded.model.config().s2_features;
  if (!a.s2_cond.empty()) {
    if (s2 == 0) throw ValidationError("s2-cond: checkpoint has no S2 conditioning");
    cond.s2 = load_s2_condition(a.s2_cond, loaded.meta.s2_lags);
  } else if (s2 > 0) {
    throw ValidationError("checkpoint expects S2 conditioning; pass --s2-cond");
  }
  auto sched = respace(cosine_schedule(loaded.meta.diffusion_steps, loaded.meta.s_offset), rc.sample.steps);
  const SamplerSpec spec{rc.sample.mode, rc.sample.eta};
  return {std::move(loaded), rc, cond, std::move(sched), spec};
}

ojson sampling_json(const char* command, const SampleArgs& a, const Prepared& p) {
  ojson j;
  j["command"] = command;
  j["checkpoint"] = a.ckpt;
  j["output"] = a.out;
  j["seed"] = a.seed;
  j["steps"] = p.rc.sample.steps;
  j["mode"] = to_string(p.rc.sample.mode);
  j["eta"] = p.rc.sample.eta;
  j["cfg_scale"] = p.rc.sample.cfg_scale;
  j["porosity_condition"] = p.rc.sample.porosity;
  j["s2_condition"] = p.cond.s2 ? ojson(*p.cond.s2) : ojson(nullptr);
  return j;
}

void run_sample(const SampleArgs& a, const std::string& config) {
  Prepared p = prepare_sampling(a, config);
  const Denoiser den = make_denoiser(p.loaded.model, p.cond, GuidanceSpec{p.rc.sample.cfg_scale, true});
  const Dims dims = Dims::cube(std::size_t(p.loaded.model.config().input_size));
  const auto r = sample(den, dims, p.sched, p.spec, a.seed);
  save_volume(r.volume, a.out);
  ojson j = sampling_json("sample", a, p);
  j["dims"] = dims_json(dims);
  j["porosity"] = r.volume.porosity();
  j["otsu_threshold"] = r.otsu_threshold;
  j["largest_cluster_fraction"] = r.volume.pore_count() ? connectivity_fraction(r.volume) : 0.0;
  emit(j, a.report);
}

void run_sample_tiled(const SampleArgs& a, const std::string& config) {
  Prepared p = prepare_sampling(a, config);
  auto& t = p.rc.tiling;
  override_with(a.size, t.size);
  override_with(a.tile, t.tile);
  override_with(a.overlap, t.overlap);
  if (!a.noise.empty()) t.noise = parse_noise_mode(a.noise);
  const std::size_t input = std::size_t(p.loaded.model.config().input_size);
  if (t.tile != input)
    throw ValidationError("tile size " + std::to_string(t.tile) + " must equal the checkpoint input size " +
                          std::to_string(input));
  const Denoiser den = make_denoiser(p.loaded.model, p.cond, GuidanceSpec{p.rc.sample.cfg_scale, true});
  const auto r = sample_tiled(den, Dims::cube(t.size), t.tile, t.overlap, t.noise, p.sched, p.spec, a.seed);
  save_volume(r.volume, a.out);
  ojson j = sampling_json("sample-tiled", a, p);
  j["dims"] = dims_json(r.report.dims);
  j["tile"] = r.report.tile;
  j["overlap"] = r.report.overlap;
  j["tiles"] = r.report.tiles;
  j["noise"] = to_string(r.report.mode);
  j["porosity"] = r.report.porosity;
  j["otsu_threshold"] = r.report.otsu_threshold;
  j["largest_cluster_fraction"] = r.report.largest_cluster_fraction;
  emit(j, a.report);
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeArgs {
  std::string in, report, csv;
  bool clean = false;
};

void run_analyze(const AnalyzeArgs& a) {
  const BinaryVolume v = read_volume(a.in);
  const auto m = analyze(v, a.clean);
  const auto lags = clip_lags(std::min({v.dims().d, v.dims().h, v.dims().w}));
  ojson j;
  j["command"] = "analyze";
  j["input"] = a.in;
  j["dims"] = dims_json(v.dims());
  j["porosity"] = m.porosity;
  j["specific_surface"] = m.specific_surface;
  j["specific_surface_slope"] = m.specific_surface_slope;
  j["euler_characteristic"] = m.euler_chi;
  j["largest_cluster_fraction"] = m.largest_cluster_fraction;
  j["cleaned"] = m.cleaned;
  j["cleaned_voxel_count"] = m.cleaned_voxel_count;
  j["s2_radial"] = m.s2_radial;
  j["s2_axis"] = m.s2_axis;
  j["lineal_path"] = m.lineal_path;
  j["s2_shift"] = {{"lags", lags}, {"values", s2_at_lags(v, lags)}};
  const std::string csv = !a.csv.empty() ? a.csv : a.report.empty() ? "" : with_suffix(a.report, ".curves.csv");
  if (!csv.empty()) {
    std::ostringstream out;
    out.precision(12);
    out << "r,s2_radial,s2_axis,lineal_path\n";
    const std::size_t rows = std::max({m.s2_radial.size(), m.s2_axis.size(), m.lineal_path.size()});
    auto cell = [&](const std::vector<double>& c, std::size_t r) {
      if (r < c.size()) out << c[r];
    };
    for (std::size_t r = 0; r < rows; ++r) {
      out << r << ',';
      cell(m.s2_radial, r);
      out << ',';
      cell(m.s2_axis, r);
      out << ',';
      cell(m.lineal_path, r);
      out << '\n';
    }
    write_text(csv, out.str());
    j["curves_csv"] = csv;
  }
  emit(j, a.report);
}

// ---------------------------------------------------------------------------
// lbm

struct LbmArgs {
  std::string in, report, history, axis = "z";
  LbmConfig cfg;
  std::optional<double> voxel_size;
};

void run_lbm(const LbmArgs& a) {
  LbmConfig cfg = a.cfg;
  cfg.axis = parse_axis(a.axis);
  cfg.voxel_size = a.voxel_size;
  const BinaryVolume v = read_volume(a.in);
  const auto r = run_permeability(v, cfg);
  const std::string history = !a.history.empty() ? a.history : a.report.empty() ? "" : with_suffix(a.report, ".history.csv");
  ojson j;
  j["command"] = "lbm";
  j["input"] = a.in;
  j["dims"] = dims_json(v.dims());
  j["axis"] = axis_name(cfg.axis);
  j["tau"] = cfg.tau;
  j["rho_in"] = cfg.rho_in;
  j["rho_out"] = cfg.rho_out;
  j["tol"] = cfg.tol;
  j["max_steps"] = cfg.max_steps;
  j["porosity"] = r.porosity;
  j["k_lattice"] = r.k_lattice;
  j["k_physical"] = r.k_physical ? ojson(*r.k_physical) : ojson(nullptr);
  j["mean_velocity"] = r.mean_velocity;
  j["mean_density"] = r.mean_density;
  j["viscosity"] = r.viscosity;
  j["pressure_drop"] = r.pressure_drop;
  j["length"] = r.length;
  j["steps"] = r.steps;
  j["converged"] = r.converged;
  j["final_rel_change"] = r.final_rel_change;
  if (!history.empty()) {
    std::ostringstream out;
    out.precision(12);
    out << "step,rel_change,mean_velocity\n";
    for (const auto& h : r.history) out << h.step << ',' << h.rel_change << ',' << h.mean_velocity << '\n';
    write_text(history, out.str());
    j["history_csv"] = history;
  }
  emit(j, a.report);
}

// ---------------------------------------------------------------------------
// novelty

std::vector<std::pair<std::string, BinaryVolume>> load_volumes(const std::string& path) {
  std::vector<std::pair<std::string, BinaryVolume>> out;
  if (fs::is_regular_file(path)) {
    out.emplace_back(fs::path(path).filename().string(), read_volume(path));
    return out;
  }
  const Dataset ds = load_dataset(path);
  for (std::size_t i = 0; i < ds.size(); ++i) out.emplace_back(ds.names[i], ds.volumes[i]);
  return out;
}

void run_novelty(const std::string& gen, const std::string& train_dir, const std::string& report) {
  const auto generated = load_volumes(gen);
  const Dataset ds = load_dataset(train_dir);
  ojson samples = ojson::array();
  double lo = INFINITY, sum = 0;
  for (const auto& [name, g] : generated) {
    double best = INFINITY;
    std::size_t nearest = 0;
    for (std::size_t k = 0; k < ds.size(); ++k) {
      const double d = voxel_distance(g, ds.volumes[k]);
      if (d < best) {
        best = d;
        nearest = k;
      }
    }
    samples.push_back({{"file", name}, {"d_min", best}, {"nearest", ds.names[nearest]}});
    lo = std::min(lo, best);
    sum += best;
  }
  ojson j;
  j["command"] = "novelty";
  j["training_count"] = ds.size();
  j["generated_count"] = generated.size();
  j["d_min_min"] = lo;
  j["d_min_mean"] = sum / double(generated.size());
  j["samples"] = samples;
  emit(j, report);
}

// ---------------------------------------------------------------------------
// report

void run_report(const std::string& dir, const std::string& out) {
  if (!fs::is_directory(dir)) throw ValidationError("directory not found: " + dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::ostringstream csv;
  csv.precision(12);
  csv << "file,porosity,k_lattice,converged\n";
  std::size_t rows = 0;
  for (const auto& f : files) {
    nlohmann::json j;
    try {
      std::ifstream in(f);
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception&) {
      throw ValidationError("report: malformed JSON in " + f.string());
    }
    if (!j.is_object() || !j.contains("k_lattice") || !j.contains("porosity")) continue;
    csv << f.filename().string() << ',' << j["porosity"].get<double>() << ',' << j["k_lattice"].get<double>() << ','
        << (j.value("converged", false) ? "true" : "false") << '\n';
    ++rows;
  }
  if (rows == 0) throw ValidationError("report: no permeability reports in " + dir);
  write_text(out, csv.str());
  ojson j;
  j["command"] = "report";
  j["dir"] = dir;
  j["out"] = out;
  j["rows"] = rows;
  emit(j, "");
}

// ---------------------------------------------------------------------------
// repro-desk

int run_repro_desk(std::uint64_t seed, bool quick, const std::string& work, const std::string& config) {
  acceptance::Options o;
  o.seed = seed;
  o.quick = quick;
  o.work_dir = work;
  o.desk = base_config(config);
  o.cli = fs::read_symlink("/proc/self/exe");
  o.log = &std::cerr;
  fs::create_directories(o.work_dir);
  const auto results = acceptance::run_all(o, {}, [](const acceptance::Result& r) {
    std::cout << acceptance::format_line(r) << std::endl;
  });
  int passed = 0;
  ojson list = ojson::array();
  for (const auto& r : results) {
    passed += r.pass;
    list.push_back({{"id", r.id}, {"name", r.name}, {"pass", r.pass}, {"detail", r.detail}});
  }
  write_json({{"command", "repro-desk"}, {"seed", seed}, {"quick", quick}, {"criteria", list}},
             o.work_dir / "summary.json");
  std::cout << "repro-desk: " << passed << "/" << results.size() << " criteria passed" << std::endl;
  return passed == int(results.size()) ? 0 : 3;
}

int fail(const char* kind, const std::string& reason, int code) {
  std::cerr << ojson{{"error", kind}, {"reason", reason}}.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"poredit: diffusion-based porous media generation and analysis"};
  app.require_subcommand(1);
  int threads = 0;
  std::string config;
  app.add_option("--threads", threads, "Worker threads (default: POREDIT_THREADS, else 1)");
  app.add_option("--config", config, "Run configuration JSON");
  app.fallthrough();

  SynthArgs sy;
  auto* synth = app.add_subcommand("synth", "Synthetic Gaussian-random-field training volumes");
  synth->add_option("--count", sy.count, "Number of volumes");
  synth->add_option("--size", sy.size, "Cube edge");
  synth->add_option("--porosity", sy.porosity, "Mean target porosity");
  synth->add_option("--spread", sy.spread, "Porosity range across the ensemble (uniformly spaced)");
  synth->add_option("--corr-len", sy.corr_len, "Gaussian correlation length (voxels)");
  synth->add_option("--seed", sy.seed, "Seed");
  synth->add_option("--out", sy.out, "Output directory")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model on a directory of .pdtv volumes");
  train_cmd->add_option("--data", tr.data, "Training directory")->required();
  train_cmd->add_option("--out", tr.out, "Checkpoint path")->required();
  train_cmd->add_option("--seed", tr.seed, "Seed");
  train_cmd->add_option("--log", tr.log, "Per-epoch CSV log (default <out>.train.csv)");
  train_cmd->add_option("--steps", tr.steps, "Stop after this many samples (0 = no limit)");
  train_cmd->add_option("--epochs", tr.epochs, "Epochs");

  SampleArgs sa;
  auto add_sampling = [](CLI::App* cmd, SampleArgs& s) {
    cmd->add_option("--ckpt", s.ckpt, "Checkpoint")->required();
    cmd->add_option("--porosity", s.porosity, "Porosity condition");
    cmd->add_option("--s2-cond", s.s2_cond, "S2 condition: .pdtv volume or analyze report");
    cmd->add_option("--steps", s.steps, "Reverse steps");
    cmd->add_option("--mode", s.mode, "ddim or ancestral");
    cmd->add_option("--eta", s.eta, "DDIM stochasticity");
    cmd->add_option("--cfg", s.cfg, "Guidance scale");
    cmd->add_option("--seed", s.seed, "Seed");
    cmd->add_option("--out", s.out, "Output .pdtv")->required();
    cmd->add_option("--report", s.report, "JSON report path");
  };
  auto* sample_cmd = app.add_subcommand("sample", "Generate one volume at the model size");
  add_sampling(sample_cmd, sa);
  SampleArgs st;
  auto* tiled_cmd = app.add_subcommand("sample-tiled", "Generate a larger volume by overlapping tiles");
  add_sampling(tiled_cmd, st);
  tiled_cmd->add_option("--size", st.size, "Output cube edge");
  tiled_cmd->add_option("--tile", st.tile, "Tile edge (the model input size)");
  tiled_cmd->add_option("--overlap", st.overlap, "Tile overlap");
  tiled_cmd->add_option("--noise", st.noise, "coherent or independent");

  AnalyzeArgs an;
  auto* analyze_cmd = app.add_subcommand("analyze", "Morphological and topological metrics");
  analyze_cmd->add_option("--in", an.in, "Input .pdtv")->required();
  analyze_cmd->add_flag("--clean", an.clean, "Remove pore clusters below 34 voxels before topology");
  analyze_cmd->add_option("--report", an.report, "JSON report path");
  analyze_cmd->add_option("--csv", an.csv, "Curve CSV (default <report>.curves.csv)");

  LbmArgs lb;
  auto* lbm_cmd = app.add_subcommand("lbm", "Permeability by D3Q19 lattice Boltzmann");
  lbm_cmd->add_option("--in", lb.in, "Input .pdtv")->required();
  lbm_cmd->add_option("--axis", lb.axis, "Flow axis z, y or x");
  lbm_cmd->add_option("--tau", lb.cfg.tau, "Relaxation time");
  lbm_cmd->add_option("--rho-in", lb.cfg.rho_in, "Inlet density");
  lbm_cmd->add_option("--rho-out", lb.cfg.rho_out, "Outlet density");
  lbm_cmd->add_option("--tol", lb.cfg.tol, "Relative velocity-change tolerance");
  lbm_cmd->add_option("--max-steps", lb.cfg.max_steps, "Step limit");
  lbm_cmd->add_option("--check-interval", lb.cfg.check_interval, "Steps between convergence checks");
  lbm_cmd->add_option("--voxel-size", lb.voxel_size, "Voxel edge for K_physical = K_lattice dx^2");
  lbm_cmd->add_option("--report", lb.report, "JSON report path");
  lbm_cmd->add_option("--history", lb.history, "Convergence CSV (default <report>.history.csv)");

  std::string nv_gen, nv_train, nv_report;
  auto* novelty_cmd = app.add_subcommand("novelty", "Nearest-training-neighbour distance D_min");
  novelty_cmd->add_option("--gen", nv_gen, "Generated .pdtv file or directory")->required();
  novelty_cmd->add_option("--train", nv_train, "Training directory")->required();
  novelty_cmd->add_option("--report", nv_report, "JSON report path");

  std::string rp_dir, rp_out = "porosity_permeability.csv";
  auto* report_cmd = app.add_subcommand("report", "Porosity-permeability CSV from lbm reports");
  report_cmd->add_option("--dir", rp_dir, "Directory of lbm JSON reports")->required();
  report_cmd->add_option("--out", rp_out, "CSV path");

  std::uint64_t rd_seed = 1;
  bool rd_quick = false;
  std::string rd_work = "repro_desk";
  auto* repro_cmd = app.add_subcommand("repro-desk", "End-to-end desk-scale reproduction with pass/fail table");
  repro_cmd->add_option("--seed", rd_seed, "Seed");
  repro_cmd->add_flag("--quick", rd_quick, "Metrics and lattice Boltzmann criteria only");
  repro_cmd->add_option("--work-dir", rd_work, "Artifact directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("validation", e.what(), 1);
  }

  try {
    set_num_threads(threads > 0 ? threads : threads_from_env());
    if (*synth) run_synth(sy, config);
    else if (*train_cmd) run_train(tr, config);
    else if (*sample_cmd) run_sample(sa, config);
    else if (*tiled_cmd) run_sample_tiled(st, config);
    else if (*analyze_cmd) run_analyze(an);
    else if (*lbm_cmd) run_lbm(lb);
    else if (*novelty_cmd) run_novelty(nv_gen, nv_train, nv_report);
    else if (*report_cmd) run_report(rp_dir, rp_out);
    else if (*repro_cmd) return run_repro_desk(rd_seed, rd_quick, rd_work, config);
    return 0;
  } catch (const ValidationError& e) {
    return fail("validation", e.what(), 1);
  } catch (const RuntimeFailure& e) {
    return fail("runtime", e.what(), 2);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), 2);
  }
}
