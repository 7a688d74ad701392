// Command-line entry point: training, sampling, evaluation, the ablation
// studies and the invariant self-test suite.
//
// Exit codes: 0 success, 1 usage, 2 validation, 3 runtime failure.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "pic/config.hpp"
#include "pic/sampling_eval.hpp"
#include "pic/selfcheck.hpp"

namespace fs = std::filesystem;
using namespace pic;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

std::string git_describe() {
    std::FILE* pipe = ::popen("git describe --always --dirty 2>/dev/null", "r");
    if (!pipe) return "unknown";
    char buf[256] = {0};
    std::string out;
    while (std::fgets(buf, sizeof buf, pipe)) out += buf;
    ::pclose(pipe);
    while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
    return out.empty() ? "unknown" : out;
}

void apply_threads(const RunConfig& cfg, int flag_threads) {
    int n = flag_threads;
    if (n < 0) {
        n = (int)cfg.get_int("threads");
        if (n == 0)
            if (const char* env = std::getenv("PIC_THREADS")) n = std::atoi(env);
    }
    set_threads(n);
}

// --- config text embedded in checkpoints -------------------------------------

std::map<std::string, std::vector<double>> config_meta(const RunConfig& cfg) {
    const std::string text = cfg.to_text();
    std::vector<double> packed((text.size() + 7) / 8, 0.0);
    std::memcpy(packed.data(), text.data(), text.size());
    return {{"config_text", std::move(packed)}, {"config_text_len", {(double)text.size()}}};
}

RunConfig config_from_records(const std::vector<CkptRecord>& records) {
    std::vector<double> packed;
    std::size_t len = 0;
    for (const auto& r : records) {
        if (r.name == "__meta.config_text") packed = r.values<double>();
        if (r.name == "__meta.config_text_len") len = (std::size_t)r.values<double>()[0];
    }
    check(!packed.empty() && len > 0, "checkpoint does not carry its run configuration");
    std::string text(len, '\0');
    std::memcpy(text.data(), packed.data(), len);
    return RunConfig::parse_text(text, "<checkpoint>");
}

struct LoadedModel {
    RunConfig cfg;
    ParameterStore<double> store;
    ColorModel<double> model;
};

LoadedModel load_model(const std::string& ckpt_path) {
    auto records = load_checkpoint_file(ckpt_path);
    LoadedModel lm{config_from_records(records), {}, {}};
    check(lm.cfg.get("training.precision") == "f64",
          "this build loads f64 checkpoints for inference; re-train with training.precision = f64");
    lm.model = ColorModel<double>(lm.cfg.model_config(), lm.store, lm.cfg.get_u64("training.seed"));
    apply_checkpoint(lm.store, records);
    return lm;
}

Dataset load_dataset(const RunConfig& cfg, const std::string& dir, double heldout_override = -1.0) {
    const double frac =
        heldout_override >= 0.0 ? heldout_override : cfg.get_float("data.heldout_fraction");
    const auto res = (std::size_t)cfg.get_int("data.resolution");
    const int f = (int)cfg.get_int("model.subsample");
    if (cfg.get("data.format") == "cifar10") {
        std::vector<std::string> files;
        for (const auto& p : fs::directory_iterator(dir))
            if (p.is_regular_file() && p.path().extension() == ".bin") files.push_back(p.path().string());
        std::sort(files.begin(), files.end());
        check(!files.empty(), "no .bin CIFAR batches under " + dir);
        auto ds = read_cifar10_binary(files, frac);
        check(ds.manifest.resolution == res, "cifar10 data is 32x32; set data.resolution = 32");
        ds.manifest.subsample = f;
        return ds;
    }
    auto ds = scan_folder(dir, res, f, frac);
    return ds;
}

ImageU8 gray_tile(const ImageU8& rgb) {
    auto lab = rgb_to_lab(rgb);
    ImageU8 out(rgb.width, rgb.height, 3);
    for (std::size_t i = 0; i < lab.L.size(); ++i) {
        const auto v = (std::uint8_t)std::lround(lab.L[i] / 100.0 * 255.0);
        out.pixels[3 * i] = out.pixels[3 * i + 1] = out.pixels[3 * i + 2] = v;
    }
    return out;
}

ImageU8 gray_input_of(const ImageU8& rgb) {
    auto lab = rgb_to_lab(rgb);
    ImageU8 gray(rgb.width, rgb.height, 1);
    for (std::size_t i = 0; i < lab.L.size(); ++i)
        gray.pixels[i] = (std::uint8_t)std::lround(lab.L[i] / 100.0 * 255.0);
    return gray;
}

void write_run_json(const std::string& out_dir, const RunConfig& cfg, double wallclock_s) {
    nlohmann::json j;
    j["config"] = cfg.to_text();
    j["config_hash"] = cfg.hash();
    j["git_describe"] = git_describe();
    j["wallclock_s"] = wallclock_s;
    std::ofstream f(fs::path(out_dir) / "run.json");
    f << j.dump(2) << "\n";
}

// --- commands ----------------------------------------------------------------

int cmd_train(const std::string& config_path, const std::string& data_dir, const std::string& out_dir,
              const std::string& resume, int threads) {
    const auto t0 = std::chrono::steady_clock::now();
    RunConfig cfg = config_path.empty() ? RunConfig() : RunConfig::load(config_path);
    if (!data_dir.empty()) cfg.set("data.dir", data_dir, "--data");
    if (!out_dir.empty()) cfg.set("out.dir", out_dir, "--out");
    apply_threads(cfg, threads);
    std::cout << "resolved configuration:\n" << cfg.describe() << "\n";
    check(!cfg.get("data.dir").empty(), "no dataset directory (data.dir or --data)");
    check(!cfg.get("out.dir").empty(), "no output directory (out.dir or --out)");

    auto ds = load_dataset(cfg, cfg.get("data.dir"));
    std::cout << "dataset: " << ds.manifest.entries.size() << " images ("
              << ds.split_indices(kTrainSplit).size() << " train / "
              << ds.split_indices(kHeldoutSplit).size() << " heldout), warnings "
              << ds.manifest.warnings << "\n";

    Trainer<double> trainer(cfg.model_config(), cfg.train_config(), cfg.hash());
    trainer.extra_meta = config_meta(cfg);
    if (!resume.empty()) {
        trainer.resume_from(resume);
        std::cout << "resumed from " << resume << " at iteration " << trainer.iteration() << "\n";
    }
    auto res = trainer.train(ds, cfg.get("out.dir"));
    std::cout << "finished " << res.iterations << " iterations; " << res.eval_split
              << " bpd: " << res.final_eval_bpd_shadow << " (polyak) / " << res.final_eval_bpd_raw
              << " (raw)\n";
    if (res.final_eval_bpd_shadow > res.final_eval_bpd_raw + 0.05)
        std::cout << "note: polyak evaluation is more than 0.05 bpd worse than raw weights\n";
    write_run_json(cfg.get("out.dir"),
                   cfg, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    return kExitOk;
}

int cmd_colorize(const std::string& ckpt, const std::string& input, int samples, std::uint64_t seed,
                 const std::string& out_dir, const std::string& weights, int threads) {
    auto lm = load_model(ckpt);
    apply_threads(lm.cfg, threads);
    check(fs::exists(input), "input image not found: " + input);
    auto png = read_png(input);
    fs::create_directories(out_dir);

    auto res = colorize(lm.model, lm.store, png, samples, seed, weights == "polyak");
    const std::size_t dims = 2 * res.a_bins[0].size();
    nlohmann::json sidecar;
    sidecar["input"] = input;
    sidecar["seed"] = seed;
    sidecar["weights_variant"] = weights;
    auto arr = nlohmann::json::array();
    for (int i = 0; i < samples; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "sample_%03d.png", i);
        write_png(lab_to_rgb(res.samples[(std::size_t)i]), (fs::path(out_dir) / name).string());
        arr.push_back({{"file", name},
                       {"nll_nats", res.nll_nats[(std::size_t)i]},
                       {"bits_per_dim", bits_per_dim(res.nll_nats[(std::size_t)i], dims)},
                       {"saturation_pct", res.saturation_pct[(std::size_t)i]}});
        std::cout << name << "  nll " << res.nll_nats[(std::size_t)i] << " nats  saturation "
                  << res.saturation_pct[(std::size_t)i] << "%\n";
    }
    sidecar["samples"] = arr;
    std::ofstream f(fs::path(out_dir) / "colorize.json");
    f << sidecar.dump(2) << "\n";
    return kExitOk;
}

int cmd_sample_grid(const std::string& ckpt, const std::string& data_dir, int n, std::uint64_t seed,
                    const std::string& out_dir, int threads) {
    auto lm = load_model(ckpt);
    apply_threads(lm.cfg, threads);
    auto ds = load_dataset(lm.cfg, data_dir, 0.0);
    check(!ds.images.empty(), "empty dataset");
    n = std::min<int>(n, (int)ds.images.size());
    fs::create_directories(out_dir);

    // 4-column rows: grayscale input, two samples, original
    std::vector<ImageU8> tiles;
    for (int i = 0; i < n; ++i) {
        const ImageU8& orig = ds.images[(std::size_t)i];
        auto gray = gray_input_of(orig);
        auto res = colorize(lm.model, lm.store, gray, 2, derive_seed(seed, "grid", (std::uint64_t)i));
        tiles.push_back(gray_tile(orig));
        tiles.push_back(lab_to_rgb(res.samples[0]));
        tiles.push_back(lab_to_rgb(res.samples[1]));
        tiles.push_back(orig);
    }
    auto grid = make_montage(tiles, 4);
    write_png(grid, (fs::path(out_dir) / "sample_grid.png").string());
    std::cout << "wrote " << (fs::path(out_dir) / "sample_grid.png").string() << " (" << n
              << " rows)\n";
    return kExitOk;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& weights,
             const std::string& out_dir, int threads) {
    auto lm = load_model(ckpt);
    apply_threads(lm.cfg, threads);
    auto ds = load_dataset(lm.cfg, data_dir, 0.0);  // evaluate the whole directory
    std::vector<PerImageEval> table;
    auto report = evaluate_bpd(lm.model, lm.store, ds, kTrainSplit,
                               (std::size_t)lm.cfg.get_int("training.batch_size"),
                               weights == "polyak", lm.cfg.hash(), &table);
    std::cout << report.to_json().dump(2) << "\n";
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::ofstream jf(fs::path(out_dir) / "eval_report.json");
        jf << report.to_json().dump(2) << "\n";
        std::ofstream csv(fs::path(out_dir) / "per_image.csv");
        csv << "filename,nats,bits_per_dim,saturation_pct\n";
        for (const auto& row : table)
            csv << row.id << "," << row.nats << "," << row.bpd << "," << row.saturation_pct << "\n";
    }
    return kExitOk;
}

int cmd_ablate(const std::string& config_path, const std::string& data_dir, const std::string& out_dir,
               int threads) {
    const auto t0 = std::chrono::steady_clock::now();
    RunConfig cfg = config_path.empty() ? RunConfig() : RunConfig::load(config_path);
    if (!data_dir.empty()) cfg.set("data.dir", data_dir, "--data");
    if (!out_dir.empty()) cfg.set("out.dir", out_dir, "--out");
    apply_threads(cfg, threads);
    check(!cfg.get("data.dir").empty(), "no dataset directory (data.dir or --data)");
    check(!cfg.get("out.dir").empty(), "no output directory (out.dir or --out)");
    auto ds = load_dataset(cfg, cfg.get("data.dir"));

    auto outcome = ablate<double>(cfg.model_config(), cfg.train_config(), ds, cfg.get("out.dir"),
                                  cfg.hash());
    std::cout << outcome.to_json().dump(2) << "\n";
    std::cout << "parameter audit: gated " << outcome.params_gated << ", ungated "
              << outcome.params_ungated << " (gate halves: "
              << outcome.params_gated - outcome.params_ungated << "), embedding-only "
              << outcome.params_embonly << "\n";
    write_run_json(cfg.get("out.dir"), cfg,
                   std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    return kExitOk;
}

int cmd_pmf_dump(const std::string& ckpt, const std::string& input, int py, int px,
                 const std::string& out_csv, int threads) {
    auto lm = load_model(ckpt);
    apply_threads(lm.cfg, threads);
    auto png = read_png(input);
    check(png.channels == 3, "pmf-dump teacher-forces on an RGB input image");
    const int f = lm.model.config().subsample;
    auto lab = subsample_chroma(rgb_to_lab(png), f);

    const std::size_t ch = lab.chroma_h(), cw = lab.chroma_w();
    check(py >= 0 && (std::size_t)py < ch && px >= 0 && (std::size_t)px < cw,
          "pixel out of range for the subsampled chroma grid");
    const int levels = lm.model.config().levels;
    ChromaAlphabet ab{levels};
    ArrayND<double> ctx({1, 2, ch, cw});
    std::vector<int> abins(ch * cw), bbins(ch * cw);
    for (std::size_t p = 0; p < ch * cw; ++p) {
        abins[p] = ab.quantize(ChromaAlphabet::normalize_a(lab.a[p]));
        bbins[p] = ab.quantize(ChromaAlphabet::normalize_b(lab.b[p]));
        ctx.data[p] = ab.dequantize(abins[p]);
        ctx.data[ch * cw + p] = ab.dequantize(bbins[p]);
    }
    auto lum = normalize_luminance<double>(lab.L, 1, png.height, png.width);
    Tape<double> tape;
    ParamBinder<double> pb(tape, lm.store, true, false);
    auto params = lm.model.forward_params(pb, lum, ctx);
    std::vector<double> field(params.cvalue().begin(), params.cvalue().end());
    auto pm = extract_pixel(field, params.shape(), 0, (std::size_t)py, (std::size_t)px,
                            lm.model.config().mixture_components);
    auto grid = pmf_enumerate(pm, levels);

    std::ofstream csv(out_csv);
    check(csv.good(), "cannot write " + out_csv);
    for (int a = 0; a < levels; ++a) {
        for (int b = 0; b < levels; ++b)
            csv << grid[(std::size_t)a * (std::size_t)levels + (std::size_t)b]
                << (b + 1 == levels ? "" : ",");
        csv << "\n";
    }
    std::cout << "wrote " << out_csv << " (" << levels << "x" << levels << " grid)\n";
    return kExitOk;
}

int cmd_dep_audit(int blocks, int channels, int grid, std::uint64_t seed, const std::string& out_png) {
    ARConfig cfg;
    cfg.blocks = blocks;
    cfg.channels = (std::size_t)channels;
    cfg.cond_channels = 4;
    ParameterStore<double> store;
    ARNet<double> net("ar", cfg);
    Rng rng(seed);
    net.register_params(store, rng);
    for (auto& [name, e] : store.entries())
        for (auto& v : e.value.data)
            v = (name.size() > 2 && name.compare(name.size() - 2, 2, ".g") == 0)
                    ? 1.0 + 0.1 * rng.normal()
                    : 0.4 * rng.normal();

    const auto hw = (std::size_t)grid;
    ChromaAlphabet ab;
    ArrayND<double> base({1, 2, hw, hw});
    for (auto& v : base.data) v = ab.dequantize((int)rng.below(256));
    ArrayND<double> cond({1, 4, hw, hw});
    for (auto& v : cond.data) v = rng.uniform(-1.0, 1.0);
    auto fwd = [&](const ArrayND<double>& chroma) {
        Tape<double> tape;
        ParamBinder<double> pb(tape, store, false, false);
        return net.forward(pb, chroma, tape.leaf(cond, false)).cvalue();
    };
    const auto ref = fwd(base);
    ImageU8 mask(hw * hw, hw * hw, 1);
    for (std::size_t j = 0; j < hw * hw; ++j) {
        auto bumped = base;
        bumped.at4(0, 0, j / hw, j % hw) += 0.31;
        bumped.at4(0, 1, j / hw, j % hw) -= 0.17;
        const auto got = fwd(bumped);
        for (std::size_t i = 0; i < hw * hw; ++i) {
            bool dep = false;
            for (std::size_t c = 0; c < 60 && !dep; ++c)
                dep = got[c * hw * hw + i] != ref[c * hw * hw + i];
            mask.pixels[i * hw * hw + j] = dep ? 255 : 0;
        }
    }
    write_png(mask, out_png);
    std::cout << "wrote " << out_png << " (" << hw * hw << "x" << hw * hw
              << " dependency mask, white = depends)\n";
    return kExitOk;
}

int cmd_describe(const std::string& config_path) {
    RunConfig cfg = config_path.empty() ? RunConfig() : RunConfig::load(config_path);
    auto emb = EmbeddingConfig::parse(cfg.get("model.embedding_arch"));
    std::cout << "embedding network (input " << cfg.get_int("data.resolution") << "x"
              << cfg.get_int("data.resolution") << "):\n"
              << describe_embedding(emb, (std::size_t)cfg.get_int("data.resolution"))
              << "autoregressive network: " << cfg.get_int("model.ar_blocks") << " residual blocks, "
              << cfg.get_int("model.ar_channels") << " channels, gating "
              << (cfg.get_bool("model.gating") ? "on" : "off") << "\n"
              << "output head: " << 6 * cfg.get_int("model.mixture_components")
              << " mixture parameter channels per pixel\n"
              << "config hash: " << cfg.hash() << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"probabilistic image colorization"};
    app.require_subcommand(1);
    int threads = -1;
    app.add_option("--threads", threads, "worker threads (1 = bit-exact reproducible)");

    std::string config_path, data_dir, out_dir, resume, ckpt, input, weights = "polyak", out_csv;
    int samples = 4, n = 4, py = 0, px = 0, blocks = 2, channels = 16, grid = 8;
    std::uint64_t seed = 1;
    bool quick = false;

    auto* train = app.add_subcommand("train", "optimize a model on a dataset");
    train->add_option("--config", config_path, "run configuration file");
    train->add_option("--data", data_dir, "dataset directory");
    train->add_option("--out", out_dir, "output directory");
    train->add_option("--resume", resume, "checkpoint to resume from");

    auto* color = app.add_subcommand("colorize", "sample colorizations of a grayscale image");
    color->add_option("--ckpt", ckpt, "model checkpoint")->required();
    color->add_option("--input", input, "grayscale (or RGB) PNG")->required();
    color->add_option("--samples", samples, "number of stochastic samples");
    color->add_option("--seed", seed, "root seed");
    color->add_option("--out", out_dir, "output directory")->required();
    color->add_option("--weights", weights, "raw|polyak")->check(CLI::IsMember({"raw", "polyak"}));

    auto* gridc = app.add_subcommand("sample-grid", "montage of inputs, samples and originals");
    gridc->add_option("--ckpt", ckpt, "model checkpoint")->required();
    gridc->add_option("--data", data_dir, "dataset directory")->required();
    gridc->add_option("--n", n, "number of rows (images)");
    gridc->add_option("--seed", seed, "root seed");
    gridc->add_option("--out", out_dir, "output directory")->required();

    auto* evalc = app.add_subcommand("eval", "bits-per-dimension over a dataset");
    evalc->add_option("--ckpt", ckpt, "model checkpoint")->required();
    evalc->add_option("--data", data_dir, "dataset directory")->required();
    evalc->add_option("--weights", weights, "raw|polyak")->check(CLI::IsMember({"raw", "polyak"}));
    evalc->add_option("--out", out_dir, "report directory (optional)");

    auto* ablatec = app.add_subcommand("ablate", "gated / ungated / embedding-only study");
    ablatec->add_option("--config", config_path, "run configuration file");
    ablatec->add_option("--data", data_dir, "dataset directory");
    ablatec->add_option("--out", out_dir, "output directory");

    auto* self = app.add_subcommand("selftest", "run the invariant suites");
    self->add_flag("--quick", quick, "reduced trial counts");

    auto* pmf = app.add_subcommand("pmf-dump", "dump one pixel's 256x256 chroma PMF as CSV");
    pmf->add_option("--ckpt", ckpt, "model checkpoint")->required();
    pmf->add_option("--input", input, "RGB PNG to teacher-force on")->required();
    pmf->add_option("--pixel-y", py, "chroma-grid row");
    pmf->add_option("--pixel-x", px, "chroma-grid column");
    pmf->add_option("--out", out_csv, "output CSV path")->required();

    auto* dep = app.add_subcommand("dep-audit", "dependency-matrix mask of the causal network");
    dep->add_option("--blocks", blocks, "residual blocks");
    dep->add_option("--channels", channels, "stream width");
    dep->add_option("--grid", grid, "chroma grid side");
    dep->add_option("--seed", seed, "weight seed");
    dep->add_option("--out", out_dir, "output PNG path")->required();

    auto* desc = app.add_subcommand("describe", "print the architecture summary");
    desc->add_option("--config", config_path, "run configuration file");

    for (auto* sub : app.get_subcommands({})) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (*train) return cmd_train(config_path, data_dir, out_dir, resume, threads);
        if (*color) return cmd_colorize(ckpt, input, samples, seed, out_dir, weights, threads);
        if (*gridc) return cmd_sample_grid(ckpt, data_dir, n, seed, out_dir, threads);
        if (*evalc) return cmd_eval(ckpt, data_dir, weights, out_dir, threads);
        if (*ablatec) return cmd_ablate(config_path, data_dir, out_dir, threads);
        if (*pmf) return cmd_pmf_dump(ckpt, input, py, px, out_csv, threads);
        if (*dep) return cmd_dep_audit(blocks, channels, grid, seed, out_dir);
        if (*desc) return cmd_describe(config_path);
        if (*self) {
            auto results = run_selftest(quick, &std::cout);
            bool all = true;
            for (const auto& r : results) all = all && r.pass;
            std::cout << (all ? "selftest: all checks passed\n" : "selftest: FAILURES above\n");
            return all ? kExitOk : kExitRuntime;
        }
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const ShapeError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::invalid_argument& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const TrainingError& e) {
        std::cerr << "training aborted: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}
