#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

#include "pic/model.hpp"
#include "pic/training.hpp"

namespace pic {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Flat key = value run configuration. Keys are declared in a schema that
// marks which fields affect numerics; the config hash covers exactly those.
class RunConfig {
public:
    enum class Kind { Int, Float, Bool, Enum, Str };

    struct Key {
        std::string name;
        Kind kind;
        std::string def;
        bool numeric;  // participates in the hash
        double lo = 0.0, hi = 0.0;            // for Int/Float range checks
        std::vector<std::string> choices;     // for Enum
        std::string help;
    };

    static const std::vector<Key>& schema() {
        static const std::vector<Key> keys = {
            {"model.kind", Kind::Enum, "full", true, 0, 0, {"full", "embedding_only"}, "model variant"},
            {"model.gating", Kind::Bool, "true", true, 0, 0, {}, "gated residual blocks"},
            {"model.mixture_components", Kind::Int, "10", true, 1, 32, {}, "logistic mixture size"},
            {"model.levels", Kind::Int, "256", true, 2, 256, {}, "quantization levels per chroma channel"},
            {"model.embedding_arch", Kind::Str, "c32,r32,c64s2,r64,r64d2,c128", true, 0, 0, {},
             "embedding ladder (c<w>[s<stride>], r<w>[d<dilation>])"},
            {"model.ar_blocks", Kind::Int, "3", true, 1, 16, {}, "autoregressive residual blocks"},
            {"model.ar_channels", Kind::Int, "48", true, 2, 512, {}, "autoregressive stream width"},
            {"model.subsample", Kind::Int, "2", true, 1, 4, {}, "chroma subsample factor (1, 2 or 4)"},
            {"model.zero_embedding", Kind::Bool, "false", true, 0, 0, {}, "zero the conditioning (control)"},
            {"data.format", Kind::Enum, "folder", true, 0, 0, {"folder", "cifar10"}, "dataset layout"},
            {"data.dir", Kind::Str, "", false, 0, 0, {}, "dataset location"},
            {"data.resolution", Kind::Int, "32", true, 8, 256, {}, "training resolution"},
            {"data.heldout_fraction", Kind::Float, "0.1", true, 0.0, 0.5, {}, "held-out id-hash fraction"},
            {"training.batch_size", Kind::Int, "16", true, 1, 512, {}, "images per optimizer step"},
            {"training.epochs", Kind::Int, "2", true, 1, 10000, {}, "training epochs"},
            {"training.lr", Kind::Float, "0.001", true, 1e-12, 10.0, {}, "initial learning rate"},
            {"training.lr_decay", Kind::Float, "0.99995", true, 1e-6, 1.0, {}, "per-iteration decay"},
            {"training.beta1", Kind::Float, "0.95", true, 0.0, 1.0, {}, "Adam first momentum"},
            {"training.beta2", Kind::Float, "0.9995", true, 0.0, 1.0, {}, "Adam second momentum"},
            {"training.adam_eps", Kind::Float, "1e-8", true, 0.0, 1.0, {}, "Adam epsilon"},
            {"training.polyak", Kind::Float, "0.9995", true, 0.0, 0.999999, {}, "Polyak shadow decay"},
            {"training.seed", Kind::Int, "1", true, 0, 9.2e18, {}, "root seed"},
            {"training.grad_clip", Kind::Float, "0", true, 0.0, 1e12, {}, "global-norm clip (0 = off)"},
            {"training.microbatch", Kind::Int, "16", true, 0, 512, {}, "gradient accumulation slice"},
            {"training.max_iterations", Kind::Int, "0", true, 0, 1e9, {}, "iteration cap (0 = epochs)"},
            {"training.checkpoint_every", Kind::Int, "0", false, 0, 1e9, {}, "extra checkpoint cadence"},
            {"training.eval_weights", Kind::Enum, "polyak", true, 0, 0, {"raw", "polyak"},
             "weights used for held-out evaluation"},
            {"training.precision", Kind::Enum, "f64", true, 0, 0, {"f64", "f32"}, "numeric precision"},
            {"training.grad_audit", Kind::Bool, "true", false, 0, 0, {}, "run-start finite-difference audit"},
            {"threads", Kind::Int, "0", false, 0, 4096, {}, "worker threads (0 = auto, 1 = bit-exact)"},
            {"out.dir", Kind::Str, "", false, 0, 0, {}, "output directory"},
        };
        return keys;
    }

    static const Key& key_spec(const std::string& name) {
        for (const auto& k : schema())
            if (k.name == name) return k;
        throw ConfigError("unknown config key: " + name);
    }

    RunConfig() {
        for (const auto& k : schema()) {
            values_[k.name] = canonical(k, k.def);
            provenance_[k.name] = "default";
        }
    }

    static RunConfig parse_text(const std::string& text, const std::string& origin = "<text>") {
        RunConfig cfg;
        std::istringstream in(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash_pos = line.find('#');
            if (hash_pos != std::string::npos) line.erase(hash_pos);
            auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                const auto e = s.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
            };
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            try {
                cfg.set(key, value, origin + ":" + std::to_string(lineno));
            } catch (const ConfigError& e) {
                throw ConfigError(std::string(e.what()) + " at " + origin + ":" + std::to_string(lineno));
            }
        }
        return cfg;
    }

    static RunConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in.good()) throw ConfigError("cannot open config file: " + path);
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return parse_text(text, path);
    }

    void set(const std::string& key, const std::string& value, const std::string& provenance) {
        const Key& spec = key_spec(key);
        values_[key] = canonical(spec, value);
        provenance_[key] = provenance;
    }

    const std::string& get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown config key: " + key);
        return it->second;
    }
    long long get_int(const std::string& key) const { return std::stoll(get(key)); }
    std::uint64_t get_u64(const std::string& key) const { return std::stoull(get(key)); }
    double get_float(const std::string& key) const { return std::stod(get(key)); }
    bool get_bool(const std::string& key) const { return get(key) == "1"; }

    // Hash over the canonicalized numeric fields, sorted by key.
    std::uint64_t hash() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& k : schema()) {
            if (!k.numeric) continue;
            const std::string line = k.name + "=" + values_.at(k.name);
            for (unsigned char c : line) {
                h ^= c;
                h *= 0x100000001b3ull;
            }
            h = mix64(h);
        }
        return h;
    }

    // Fully resolved dump with provenance, and a round-trippable text form.
    std::string describe() const {
        std::ostringstream os;
        for (const auto& k : schema())
            os << k.name << " = " << values_.at(k.name) << "    # " << provenance_.at(k.name)
               << (k.numeric ? "" : " (not hashed)") << "\n";
        return os.str();
    }

    std::string to_text() const {
        std::ostringstream os;
        for (const auto& k : schema()) os << k.name << " = " << values_.at(k.name) << "\n";
        return os.str();
    }

    ModelConfig model_config() const {
        ModelConfig mc;
        mc.kind = get("model.kind") == "full" ? ModelKind::Full : ModelKind::EmbeddingOnly;
        mc.embedding_arch = get("model.embedding_arch");
        mc.ar_blocks = (int)get_int("model.ar_blocks");
        mc.ar_channels = (std::size_t)get_int("model.ar_channels");
        mc.gating = get_bool("model.gating");
        mc.mixture_components = (int)get_int("model.mixture_components");
        mc.levels = (int)get_int("model.levels");
        mc.subsample = (int)get_int("model.subsample");
        mc.zero_embedding = get_bool("model.zero_embedding");
        const int f = mc.subsample;
        check(f == 1 || f == 2 || f == 4, "model.subsample must be 1, 2 or 4");
        EmbeddingConfig::parse(mc.embedding_arch);  // surface arch errors early
        return mc;
    }

    TrainConfig train_config() const {
        TrainConfig tc;
        tc.batch_size = (std::size_t)get_int("training.batch_size");
        tc.epochs = (std::size_t)get_int("training.epochs");
        tc.lr = get_float("training.lr");
        tc.lr_decay = get_float("training.lr_decay");
        tc.beta1 = get_float("training.beta1");
        tc.beta2 = get_float("training.beta2");
        tc.adam_eps = get_float("training.adam_eps");
        tc.polyak = get_float("training.polyak");
        tc.seed = get_u64("training.seed");
        tc.grad_clip = get_float("training.grad_clip");
        tc.microbatch = (std::size_t)get_int("training.microbatch");
        tc.max_iterations = (std::size_t)get_int("training.max_iterations");
        tc.checkpoint_every = (std::size_t)get_int("training.checkpoint_every");
        tc.eval_with_polyak = get("training.eval_weights") == "polyak";
        tc.grad_audit = get_bool("training.grad_audit");
        return tc;
    }

private:
    static std::string canonical(const Key& spec, const std::string& raw) {
        switch (spec.kind) {
            case Kind::Int: {
                long long v;
                std::size_t used = 0;
                try {
                    v = std::stoll(raw, &used);
                } catch (...) {
                    throw ConfigError(spec.name + ": expected an integer, got '" + raw + "'");
                }
                if (used != raw.size()) throw ConfigError(spec.name + ": expected an integer, got '" + raw + "'");
                if ((double)v < spec.lo || (double)v > spec.hi)
                    throw ConfigError(spec.name + ": value " + raw + " out of range [" +
                                      std::to_string((long long)spec.lo) + ", " +
                                      std::to_string((long long)spec.hi) + "]");
                return std::to_string(v);
            }
            case Kind::Float: {
                double v;
                std::size_t used = 0;
                try {
                    v = std::stod(raw, &used);
                } catch (...) {
                    throw ConfigError(spec.name + ": expected a number, got '" + raw + "'");
                }
                if (used != raw.size()) throw ConfigError(spec.name + ": expected a number, got '" + raw + "'");
                if (v < spec.lo || v > spec.hi)
                    throw ConfigError(spec.name + ": value " + raw + " out of range [" +
                                      std::to_string(spec.lo) + ", " + std::to_string(spec.hi) + "]");
                char buf[32];
                std::snprintf(buf, sizeof buf, "%.17g", v);
                return buf;
            }
            case Kind::Bool: {
                if (raw == "true" || raw == "1" || raw == "on" || raw == "yes") return "1";
                if (raw == "false" || raw == "0" || raw == "off" || raw == "no") return "0";
                throw ConfigError(spec.name + ": expected a boolean, got '" + raw + "'");
            }
            case Kind::Enum: {
                if (std::find(spec.choices.begin(), spec.choices.end(), raw) == spec.choices.end()) {
                    std::string opts;
                    for (const auto& c : spec.choices) opts += (opts.empty() ? "" : "|") + c;
                    throw ConfigError(spec.name + ": '" + raw + "' is not one of " + opts);
                }
                return raw;
            }
            case Kind::Str:
                return raw;
        }
        return raw;
    }

    std::map<std::string, std::string> values_;
    std::map<std::string, std::string> provenance_;
};

}  // namespace pic
