#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "pic/checkpoint.hpp"
#include "pic/param_store.hpp"

using namespace pic;
using Catch::Approx;

namespace {

ParameterStore<double> small_store(std::uint64_t seed) {
    ParameterStore<double> store;
    Rng rng(seed);
    store.create("w.kernel", {2, 3});
    store.create("w.bias", {3});
    store.fill_normal("w.kernel", rng, 0.5);
    store.fill_normal("w.bias", rng, 0.5);
    store.sync_shadows_to_values();
    return store;
}

std::map<std::string, ArrayND<double>> grads_like(const ParameterStore<double>& s, double fill) {
    std::map<std::string, ArrayND<double>> g;
    for (const auto& [name, e] : s.entries()) g.emplace(name, ArrayND<double>(e.value.shape, fill));
    return g;
}

}  // namespace

TEST_CASE("adam: zero gradient leaves parameters, advances step", "[optim]") {
    auto store = small_store(1);
    auto before = store.value("w.kernel").data;
    store.adam_step(grads_like(store, 0.0), 1e-3);
    REQUIRE(store.value("w.kernel").data == before);
    REQUIRE(store.entry("w.kernel").step == 1);
}

TEST_CASE("adam: single step matches the hand-executed update", "[optim]") {
    auto store = small_store(2);
    auto before = store.value("w.kernel").data;
    const double g = 0.37, lr = 1e-3;
    AdamConfig<double> cfg;
    store.adam_step(grads_like(store, g), lr, cfg);
    // from zero moments: m-hat = g, v-hat = g^2
    const double expect_delta = -lr * g / (std::sqrt(g * g) + cfg.eps);
    for (std::size_t i = 0; i < before.size(); ++i)
        REQUIRE(store.value("w.kernel").data[i] - before[i] == Approx(expect_delta).margin(1e-12));
}

TEST_CASE("adam: constant gradient update approaches lr * sign(g)", "[optim]") {
    auto store = small_store(3);
    const double g = -0.8, lr = 1e-3;
    std::vector<double> prev = store.value("w.bias").data;
    double last_step = 0.0;
    for (int i = 0; i < 400; ++i) {
        store.adam_step(grads_like(store, g), lr);
        last_step = store.value("w.bias").data[0] - prev[0];
        prev = store.value("w.bias").data;
    }
    REQUIRE(last_step == Approx(lr).epsilon(1e-4));  // moving against a negative gradient
}

TEST_CASE("adam: missing gradient is rejected", "[optim]") {
    auto store = small_store(4);
    auto g = grads_like(store, 0.1);
    g.erase("w.bias");
    REQUIRE_THROWS_WITH(store.adam_step(g, 1e-3), Catch::Matchers::ContainsSubstring("w.bias"));
}

TEST_CASE("adam and polyak are bit-deterministic", "[optim]") {
    auto a = small_store(5);
    auto b = small_store(5);
    for (int i = 0; i < 7; ++i) {
        a.adam_step(grads_like(a, 0.1 * (i + 1)), 1e-3);
        b.adam_step(grads_like(b, 0.1 * (i + 1)), 1e-3);
        a.polyak_update(0.9995);
        b.polyak_update(0.9995);
    }
    for (const auto& [name, e] : a.entries()) {
        REQUIRE(e.value.data == b.entry(name).value.data);
        REQUIRE(e.shadow.data == b.entry(name).shadow.data);
    }
}

TEST_CASE("polyak: decay zero copies, geometric gap halving, alternating fixed point", "[optim]") {
    {
        auto store = small_store(6);
        store.value("w.kernel").fill(2.5);
        store.polyak_update(0.0);
        for (double v : store.shadow("w.kernel").data) REQUIRE(v == 2.5);
    }
    {
        auto store = small_store(7);
        const double decay = 0.9995;
        store.value("w.bias").fill(1.0);
        store.shadow("w.bias").fill(0.0);
        const int halving = (int)std::ceil(std::log(2.0) / std::log(1.0 / decay));
        for (int i = 0; i < halving; ++i) store.polyak_update(decay);
        double gap = 1.0 - store.shadow("w.bias").data[0];
        REQUIRE(gap <= 0.5 * 1.001);
        REQUIRE(gap >= 0.5 * 0.99);
    }
    {
        auto store = small_store(8);
        const double decay = 0.9, va = 1.0, vb = -3.0;
        for (int i = 0; i < 500; ++i) {
            store.value("w.bias").fill(va);
            store.polyak_update(decay);
            store.value("w.bias").fill(vb);
            store.polyak_update(decay);
        }
        // closed-form fixed point after the b-phase of the 2-cycle
        const double fixed = (decay * va + vb) / (1.0 + decay);
        REQUIRE(store.shadow("w.bias").data[0] == Approx(fixed).margin(1e-9));
    }
}

TEST_CASE("checkpoint: save/load/save is byte-identical", "[optim]") {
    auto store = small_store(9);
    store.adam_step(grads_like(store, 0.3), 1e-3);
    store.polyak_update(0.9);
    std::map<std::string, std::vector<double>> meta{{"iteration", {42.0}},
                                                    {"config_hash", detail::split_u64(0xdeadbeefcafef00dull)}};
    std::string b1 = checkpoint_bytes(store, meta);

    auto records = parse_checkpoint(b1);
    auto store2 = small_store(10);  // same shapes, different values
    auto meta2 = apply_checkpoint(store2, records);
    REQUIRE(detail::join_u64(meta2.at("config_hash")) == 0xdeadbeefcafef00dull);
    REQUIRE(meta2.at("iteration")[0] == 42.0);

    std::string b2 = checkpoint_bytes(store2, meta2);
    REQUIRE(b1 == b2);

    for (const auto& [name, e] : store.entries()) {
        REQUIRE(e.value.data == store2.entry(name).value.data);
        REQUIRE(e.m1.data == store2.entry(name).m1.data);
        REQUIRE(e.m2.data == store2.entry(name).m2.data);
        REQUIRE(e.shadow.data == store2.entry(name).shadow.data);
        REQUIRE(e.step == store2.entry(name).step);
    }
}

TEST_CASE("checkpoint: corruption and mismatches raise distinct codes", "[optim]") {
    auto store = small_store(11);
    std::string good = checkpoint_bytes(store, {});

    {
        std::string bad = good;
        bad[1] = 'X';
        try {
            parse_checkpoint(bad);
            FAIL("expected BadMagic");
        } catch (const CheckpointError& e) {
            REQUIRE(e.code == CkptError::BadMagic);
        }
    }
    {
        std::string bad = good;
        bad[4] = 9;
        try {
            parse_checkpoint(bad);
            FAIL("expected BadVersion");
        } catch (const CheckpointError& e) {
            REQUIRE(e.code == CkptError::BadVersion);
        }
    }
    {
        std::string bad = good.substr(0, good.size() - 11);
        try {
            parse_checkpoint(bad);
            FAIL("expected Truncated");
        } catch (const CheckpointError& e) {
            REQUIRE(e.code == CkptError::Truncated);
        }
    }
    {
        // flip one byte inside an array payload
        std::string bad = good;
        bad[good.size() / 2] = static_cast<char>(bad[good.size() / 2] ^ 0x40);
        try {
            parse_checkpoint(bad);
            FAIL("expected ChecksumMismatch");
        } catch (const CheckpointError& e) {
            REQUIRE(e.code == CkptError::ChecksumMismatch);
        }
    }
    {
        auto records = parse_checkpoint(good);
        ParameterStore<double> other;
        other.create("w.kernel", {2, 3});
        other.create("w.other", {3});
        try {
            apply_checkpoint(other, records);
            FAIL("expected ArchMismatch");
        } catch (const CheckpointError& e) {
            REQUIRE(e.code == CkptError::ArchMismatch);
            REQUIRE(std::string(e.what()).find("w.other") != std::string::npos);
        }
    }
}
