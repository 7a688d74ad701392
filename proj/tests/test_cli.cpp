#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "pic/png_io.hpp"
#include "pic/rng.hpp"

namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
    const std::string cmd = std::string(PIC_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string run_cli_capture(const std::string& args, int& exit_code) {
    const auto tmp = fs::temp_directory_path() / ("pic_cli_out_" + std::to_string(::getpid()) + ".txt");
    const std::string cmd =
        std::string(PIC_CLI_PATH) + " " + args + " >" + tmp.string() + " 2>&1";
    exit_code = WEXITSTATUS(std::system(cmd.c_str()));
    std::ifstream in(tmp);
    std::string out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    fs::remove(tmp);
    return out;
}

struct Workspace {
    fs::path root;
    Workspace() {
        root = fs::temp_directory_path() / ("pic_cli_ws_" + std::to_string(::getpid()));
        fs::remove_all(root);
        fs::create_directories(root / "data");
        pic::Rng rng(990);
        for (int i = 0; i < 8; ++i) {
            pic::ImageU8 img(8, 8, 3);
            const double phase = rng.uniform(0.0, 6.0);
            for (std::size_t y = 0; y < 8; ++y)
                for (std::size_t x = 0; x < 8; ++x) {
                    const double t = std::sin(0.8 * x + phase) + std::cos(0.9 * y);
                    img.at(y, x, 0) = (std::uint8_t)std::lround(127 + 90 * std::sin(t));
                    img.at(y, x, 1) = (std::uint8_t)std::lround(127 + 90 * std::cos(t));
                    img.at(y, x, 2) = (std::uint8_t)std::lround(127 + 70 * std::sin(1.3 * t));
                }
            char name[32];
            std::snprintf(name, sizeof name, "img%02d.png", i);
            pic::write_png(img, (root / "data" / name).string());
        }
        std::ofstream cfg(root / "toy.cfg");
        cfg << "model.embedding_arch = c8,c16s2\n"
               "model.ar_blocks = 1\n"
               "model.ar_channels = 16\n"
               "model.mixture_components = 4\n"
               "data.resolution = 8\n"
               "data.heldout_fraction = 0\n"
               "training.batch_size = 4\n"
               "training.max_iterations = 6\n"
               "training.microbatch = 4\n"
               "training.grad_audit = false\n";
    }
    ~Workspace() { fs::remove_all(root); }
};

Workspace& workspace() {
    static Workspace ws;
    return ws;
}

}  // namespace

TEST_CASE("cli: usage errors exit 1", "[cli]") {
    REQUIRE(run_cli("definitely-not-a-subcommand") == 1);
    REQUIRE(run_cli("train --no-such-flag") == 1);
    REQUIRE(run_cli("colorize") == 1);  // missing required options
    REQUIRE(run_cli("") == 1);
}

TEST_CASE("cli: validation errors exit 2", "[cli]") {
    auto& ws = workspace();
    // nonexistent config file
    REQUIRE(run_cli("train --config /nonexistent.cfg --data " + (ws.root / "data").string() +
                    " --out " + (ws.root / "o1").string()) == 2);
    // out-of-range config value
    std::ofstream bad(ws.root / "bad.cfg");
    bad << "training.lr_decay = 1.5\n";
    bad.close();
    REQUIRE(run_cli("train --config " + (ws.root / "bad.cfg").string() + " --data " +
                    (ws.root / "data").string() + " --out " + (ws.root / "o2").string()) == 2);
    // checkpoint that isn't one
    std::ofstream fake(ws.root / "fake.pic");
    fake << "junk";
    fake.close();
    REQUIRE(run_cli("colorize --ckpt " + (ws.root / "fake.pic").string() +
                    " --input x.png --samples 1 --out " + (ws.root / "o3").string()) == 2);
}

TEST_CASE("cli: train, colorize, eval and pmf-dump round trip", "[cli]") {
    auto& ws = workspace();
    const auto out = ws.root / "run";
    int code = 0;
    auto text = run_cli_capture("train --config " + (ws.root / "toy.cfg").string() + " --data " +
                                    (ws.root / "data").string() + " --out " + out.string() +
                                    " --threads 1",
                                code);
    INFO(text);
    REQUIRE(code == 0);
    REQUIRE(fs::exists(out / "checkpoint_final.pic"));
    REQUIRE(fs::exists(out / "metrics.jsonl"));
    REQUIRE(fs::exists(out / "run.json"));
    REQUIRE(text.find("resolved configuration") != std::string::npos);
    REQUIRE(text.find("training.lr = 0.001") != std::string::npos);

    // colorize writes n PNGs plus the JSON sidecar
    const auto cdir = ws.root / "colorized";
    REQUIRE(run_cli("colorize --ckpt " + (out / "checkpoint_final.pic").string() + " --input " +
                    (ws.root / "data" / "img00.png").string() + " --samples 4 --seed 9 --out " +
                    cdir.string()) == 0);
    for (int i = 0; i < 4; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "sample_%03d.png", i);
        REQUIRE(fs::exists(cdir / name));
    }
    std::ifstream side(cdir / "colorize.json");
    auto sidecar = nlohmann::json::parse(side);
    REQUIRE(sidecar["samples"].size() == 4);
    REQUIRE(sidecar["samples"][0].contains("nll_nats"));
    REQUIRE(sidecar["samples"][0].contains("saturation_pct"));

    // eval bpd matches the training log's final heldout entry within 1e-9
    double logged = -1.0;
    {
        std::ifstream log(out / "metrics.jsonl");
        std::string line;
        while (std::getline(log, line)) {
            auto rec = nlohmann::json::parse(line);
            if (!rec["heldout_bpd"].is_null()) logged = rec["heldout_bpd"];
        }
    }
    REQUIRE(logged > 0.0);
    auto eval_out = run_cli_capture("eval --ckpt " + (out / "checkpoint_final.pic").string() +
                                        " --data " + (ws.root / "data").string() + " --out " +
                                        (ws.root / "evalout").string(),
                                    code);
    REQUIRE(code == 0);
    auto rep = nlohmann::json::parse(eval_out.substr(eval_out.find('{')));
    REQUIRE(std::abs((double)rep["bits_per_dim"] - logged) < 1e-9);
    REQUIRE(fs::exists(ws.root / "evalout" / "per_image.csv"));

    // pmf-dump emits a 256x256 CSV grid
    REQUIRE(run_cli("pmf-dump --ckpt " + (out / "checkpoint_final.pic").string() + " --input " +
                    (ws.root / "data" / "img01.png").string() + " --pixel-y 1 --pixel-x 2 --out " +
                    (ws.root / "grid.csv").string()) == 0);
    std::ifstream csv(ws.root / "grid.csv");
    std::string line;
    std::size_t rows = 0, cols = 0;
    while (std::getline(csv, line)) {
        if (rows == 0) cols = (std::size_t)std::count(line.begin(), line.end(), ',') + 1;
        ++rows;
    }
    REQUIRE(rows == 256);
    REQUIRE(cols == 256);
}

TEST_CASE("cli: sample-grid and dep-audit write PNG artifacts", "[cli]") {
    auto& ws = workspace();
    const auto out = ws.root / "run";
    if (!fs::exists(out / "checkpoint_final.pic")) {
        REQUIRE(run_cli("train --config " + (ws.root / "toy.cfg").string() + " --data " +
                        (ws.root / "data").string() + " --out " + out.string()) == 0);
    }
    REQUIRE(run_cli("sample-grid --ckpt " + (out / "checkpoint_final.pic").string() + " --data " +
                    (ws.root / "data").string() + " --n 2 --out " + (ws.root / "grid").string()) == 0);
    auto grid = pic::read_png((ws.root / "grid" / "sample_grid.png").string());
    REQUIRE(grid.width == 4 * 8);
    REQUIRE(grid.height == 2 * 8);

    REQUIRE(run_cli("dep-audit --blocks 1 --channels 8 --grid 4 --out " +
                    (ws.root / "dep.png").string()) == 0);
    auto mask = pic::read_png((ws.root / "dep.png").string());
    REQUIRE(mask.width == 16);
    REQUIRE(mask.height == 16);
    // spot-check strict causality in the mask: row i has white only left of i
    for (std::size_t i = 0; i < 16; ++i)
        for (std::size_t j = i; j < 16; ++j) REQUIRE(mask.pixels[i * 16 + j] == 0);
}

TEST_CASE("cli: describe prints the architecture summary", "[cli]") {
    int code = 0;
    auto text = run_cli_capture("describe", code);
    REQUIRE(code == 0);
    REQUIRE(text.find("Conv. 3x3/2") != std::string::npos);
    REQUIRE(text.find("autoregressive network: 3 residual blocks, 48 channels") != std::string::npos);
    REQUIRE(text.find("config hash") != std::string::npos);
}
