#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "pic/array.hpp"
#include "pic/rng.hpp"

namespace pic {

template <class T>
struct AdamConfig {
    T beta1 = T(0.95);
    T beta2 = T(0.9995);
    T eps = T(1e-8);
};

// Named trainable arrays with Adam moments and Polyak shadow copies.
// Iteration order is always name-sorted, which keeps every consumer
// (updates, serialization, gradient maps) deterministic.
template <class T>
class ParameterStore {
public:
    struct Entry {
        ArrayND<T> value;
        ArrayND<T> m1, m2, shadow;
        std::uint64_t step = 0;
        bool skip_data_init = false;  // zero-initialized layers keep their gains
    };

    ArrayND<T>& create(const std::string& name, const Shape& shape) {
        check(!entries_.count(name), "parameter already registered: " + name);
        Entry e;
        e.value = ArrayND<T>(shape);
        e.m1 = ArrayND<T>(shape);
        e.m2 = ArrayND<T>(shape);
        e.shadow = ArrayND<T>(shape);
        auto [it, ok] = entries_.emplace(name, std::move(e));
        (void)ok;
        return it->second.value;
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    Entry& entry(const std::string& name) {
        auto it = entries_.find(name);
        check(it != entries_.end(), "unknown parameter: " + name);
        return it->second;
    }
    const Entry& entry(const std::string& name) const {
        auto it = entries_.find(name);
        check(it != entries_.end(), "unknown parameter: " + name);
        return it->second;
    }

    ArrayND<T>& value(const std::string& name) { return entry(name).value; }
    ArrayND<T>& shadow(const std::string& name) { return entry(name).shadow; }

    std::map<std::string, Entry>& entries() { return entries_; }
    const std::map<std::string, Entry>& entries() const { return entries_; }

    std::size_t count() const { return entries_.size(); }

    std::size_t total_values() const {
        std::size_t n = 0;
        for (const auto& [k, e] : entries_) n += e.value.size();
        return n;
    }

    // After creation: copy values into shadows so Polyak starts at init.
    void sync_shadows_to_values() {
        for (auto& [k, e] : entries_) e.shadow.data = e.value.data;
    }

    // Bias-corrected Adam. grads must carry exactly the store's keys.
    void adam_step(const std::map<std::string, ArrayND<T>>& grads, T lr, const AdamConfig<T>& cfg = {}) {
        for (const auto& [k, g] : grads)
            check(entries_.count(k), "adam_step: gradient for unknown parameter " + k);
        for (auto& [name, e] : entries_) {
            auto git = grads.find(name);
            check(git != grads.end(), "adam_step: missing gradient for parameter " + name);
            const ArrayND<T>& g = git->second;
            check(g.shape == e.value.shape, "adam_step: gradient shape mismatch for " + name);
            e.step += 1;
            const T c1 = T(1) - std::pow(cfg.beta1, T(e.step));
            const T c2 = T(1) - std::pow(cfg.beta2, T(e.step));
            for (std::size_t i = 0; i < g.size(); ++i) {
                const T gi = g.data[i];
                e.m1.data[i] = cfg.beta1 * e.m1.data[i] + (T(1) - cfg.beta1) * gi;
                e.m2.data[i] = cfg.beta2 * e.m2.data[i] + (T(1) - cfg.beta2) * gi * gi;
                const T mhat = e.m1.data[i] / c1;
                const T vhat = e.m2.data[i] / c2;
                e.value.data[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
            }
        }
    }

    // shadow <- decay * shadow + (1 - decay) * value
    void polyak_update(T decay) {
        check(decay >= T(0) && decay < T(1), "polyak decay must be in [0,1)");
        for (auto& [name, e] : entries_)
            for (std::size_t i = 0; i < e.value.size(); ++i)
                e.shadow.data[i] = decay * e.shadow.data[i] + (T(1) - decay) * e.value.data[i];
    }

    void fill_normal(const std::string& name, Rng& rng, T stddev) {
        auto& v = value(name);
        for (auto& x : v.data) x = static_cast<T>(rng.normal()) * stddev;
    }

private:
    std::map<std::string, Entry> entries_;
};

}  // namespace pic
