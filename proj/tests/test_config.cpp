#include <catch2/catch_amalgamated.hpp>

#include "pic/config.hpp"

using namespace pic;

TEST_CASE("config: empty text yields defaults with a deterministic hash", "[config]") {
    auto c1 = RunConfig::parse_text("");
    auto c2 = RunConfig::parse_text("");
    REQUIRE(c1.hash() == c2.hash());
    REQUIRE(c1.get("training.lr") == "0.001");
    REQUIRE(c1.get_int("model.mixture_components") == 10);
    REQUIRE(c1.get_bool("model.gating"));
}

TEST_CASE("config: comments, spacing and dotted keys parse", "[config]") {
    auto cfg = RunConfig::parse_text(
        "# a comment line\n"
        "training.lr = 0.002   # trailing comment\n"
        "\n"
        "model.ar_channels=64\n"
        "model.gating = off\n");
    REQUIRE(cfg.get_float("training.lr") == 0.002);
    REQUIRE(cfg.get_int("model.ar_channels") == 64);
    REQUIRE_FALSE(cfg.get_bool("model.gating"));
}

TEST_CASE("config: same text parsed twice gives identical hashes", "[config]") {
    const std::string text = "training.lr = 1e-3\nmodel.ar_blocks = 4\n";
    REQUIRE(RunConfig::parse_text(text).hash() == RunConfig::parse_text(text).hash());
    // canonicalization: 1e-3 and 0.001 are the same number, same hash
    REQUIRE(RunConfig::parse_text("training.lr = 0.001").hash() ==
            RunConfig::parse_text("training.lr = 1e-3").hash());
}

TEST_CASE("config: out-of-range, unknown key and type errors name the offender", "[config]") {
    REQUIRE_THROWS_WITH(RunConfig::parse_text("training.lr_decay = 1.5"),
                        Catch::Matchers::ContainsSubstring("training.lr_decay") &&
                            Catch::Matchers::ContainsSubstring("out of range"));
    REQUIRE_THROWS_WITH(RunConfig::parse_text("training.momentum = 0.9\n"),
                        Catch::Matchers::ContainsSubstring("unknown config key") &&
                            Catch::Matchers::ContainsSubstring(":1"));
    REQUIRE_THROWS_WITH(RunConfig::parse_text("\ntraining.batch_size = soon"),
                        Catch::Matchers::ContainsSubstring("integer") &&
                            Catch::Matchers::ContainsSubstring(":2"));
    REQUIRE_THROWS_WITH(RunConfig::parse_text("model.kind = both"),
                        Catch::Matchers::ContainsSubstring("full|embedding_only"));
    REQUIRE_THROWS_WITH(RunConfig::parse_text("just some text"),
                        Catch::Matchers::ContainsSubstring("key = value"));
}

TEST_CASE("config: hash changes exactly for numerics-affecting fields", "[config]") {
    const RunConfig base;
    const std::uint64_t h0 = base.hash();
    for (const auto& key : RunConfig::schema()) {
        RunConfig cfg;
        std::string flipped;
        switch (key.kind) {
            case RunConfig::Kind::Int: {
                long long v = std::stoll(key.def);
                flipped = std::to_string(v + 1 <= (long long)key.hi ? v + 1 : v - 1);
                break;
            }
            case RunConfig::Kind::Float: {
                double v = std::stod(key.def);
                double alt = v + (key.hi - key.lo) / 3.0;
                if (alt > key.hi) alt = (key.lo + key.hi) / 2.0;
                char buf[32];
                std::snprintf(buf, sizeof buf, "%.17g", alt);
                flipped = buf;
                break;
            }
            case RunConfig::Kind::Bool:
                flipped = key.def == "true" ? "false" : "true";
                break;
            case RunConfig::Kind::Enum:
                for (const auto& c : key.choices)
                    if (c != key.def) flipped = c;
                break;
            case RunConfig::Kind::Str:
                flipped = key.def + "x";
                break;
        }
        cfg.set(key.name, flipped, "sweep");
        INFO(key.name << " -> " << flipped);
        if (key.numeric)
            REQUIRE(cfg.hash() != h0);
        else
            REQUIRE(cfg.hash() == h0);
    }
}

TEST_CASE("config: describe carries provenance, text round-trips", "[config]") {
    auto cfg = RunConfig::parse_text("training.lr = 0.005\n", "myfile.cfg");
    auto desc = cfg.describe();
    REQUIRE(desc.find("myfile.cfg:1") != std::string::npos);
    REQUIRE(desc.find("# default") != std::string::npos);

    auto round = RunConfig::parse_text(cfg.to_text());
    REQUIRE(round.hash() == cfg.hash());
}

TEST_CASE("config: model and train configs are materialized", "[config]") {
    auto cfg = RunConfig::parse_text(
        "model.kind = embedding_only\n"
        "model.embedding_arch = c8,c16s2\n"
        "model.ar_channels = 32\n"
        "training.batch_size = 7\n"
        "training.eval_weights = raw\n");
    auto mc = cfg.model_config();
    REQUIRE(mc.kind == ModelKind::EmbeddingOnly);
    REQUIRE(mc.ar_channels == 32);
    auto tc = cfg.train_config();
    REQUIRE(tc.batch_size == 7);
    REQUIRE_FALSE(tc.eval_with_polyak);

    REQUIRE_THROWS(RunConfig::parse_text("model.embedding_arch = r8,c8\n").model_config());
}
