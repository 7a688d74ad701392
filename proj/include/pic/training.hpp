#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "pic/checkpoint.hpp"
#include "pic/dataset.hpp"
#include "pic/model.hpp"

namespace pic {

struct TrainConfig {
    std::size_t batch_size = 16;
    std::size_t epochs = 2;
    double lr = 1e-3;               // paper initial learning rate
    double lr_decay = 0.99995;      // per-iteration multiplicative decay (CIFAR)
    double beta1 = 0.95;
    double beta2 = 0.9995;
    double adam_eps = 1e-8;
    double polyak = 0.9995;
    std::uint64_t seed = 1;
    double grad_clip = 0.0;         // global-norm clip; 0 disables
    std::size_t microbatch = 16;    // gradient-accumulation slice; 0 = whole batch
    std::size_t max_iterations = 0; // 0 = run the configured epochs
    std::size_t checkpoint_every = 0;  // extra per-iteration checkpoints; 0 = per-epoch only
    bool eval_with_polyak = true;
    bool grad_audit = true;

    void validate() const {
        check(batch_size >= 1, "batch_size must be >= 1");
        check(lr_decay > 0.0 && lr_decay <= 1.0, "lr_decay must be in (0,1]");
        check(polyak >= 0.0 && polyak < 1.0, "polyak decay must be in [0,1)");
        check(lr > 0.0, "learning rate must be positive");
    }
};

struct TrainingError : std::runtime_error {
    std::uint64_t iteration;
    TrainingError(std::uint64_t it, const std::string& msg) : std::runtime_error(msg), iteration(it) {}
};

// Teacher-forced total NLL (nats) of a split plus its chroma dimension
// count; evaluation is batched and deterministic.
template <class T>
std::pair<double, std::size_t> teacher_forced_nats(ColorModel<T>& model, ParameterStore<T>& store,
                                                   const Dataset& ds,
                                                   const std::vector<std::size_t>& indices,
                                                   std::size_t batch_size, bool use_shadow) {
    check(!indices.empty(), "evaluation split is empty");
    const int levels = model.config().levels;
    double total = 0.0;
    std::size_t dims = 0;
    for (std::size_t pos = 0; pos < indices.size(); pos += batch_size) {
        std::vector<std::size_t> idx(indices.begin() + (long)pos,
                                     indices.begin() + (long)std::min(indices.size(), pos + batch_size));
        auto batch = assemble_batch<T>(ds, idx, model.config().subsample, levels);
        Tape<T> tape;
        ParamBinder<T> pb(tape, store, use_shadow, false);
        auto loss = model.loss(pb, batch.lum_norm, batch.chroma_ctx, batch.targets(levels));
        total += static_cast<double>(loss.cvalue()[0]);
        dims += 2 * batch.a_bins.size();  // two chroma channels per subsampled pixel
    }
    return {total, dims};
}

template <class T>
double split_bpd(ColorModel<T>& model, ParameterStore<T>& store, const Dataset& ds,
                 const std::string& split, std::size_t batch_size, bool use_shadow) {
    auto idx = ds.split_indices(split);
    auto [nats, dims] = teacher_forced_nats(model, store, ds, idx, batch_size, use_shadow);
    return bits_per_dim(nats, dims);
}

// End-to-end optimization of the model on a dataset: per-iteration Adam with
// the decayed schedule and Polyak shadow updates, per-epoch held-out
// bits/dim with shadow weights, per-epoch checkpoints, bit-exact resume.
template <class T>
class Trainer {
public:
    struct EpochRecord {
        std::uint64_t epoch;
        double heldout_bpd;
        std::string eval_split;
    };

    struct Result {
        std::uint64_t iterations = 0;
        double final_eval_bpd_shadow = 0.0;
        double final_eval_bpd_raw = 0.0;
        std::string eval_split;
        std::vector<EpochRecord> epochs;
        std::uint64_t permutation_hash_epoch0 = 0;
    };

    Trainer(const ModelConfig& mc, const TrainConfig& tc, std::uint64_t config_hash)
        : model_cfg_(mc), cfg_(tc), config_hash_(config_hash), model_(mc, store_, tc.seed) {
        cfg_.validate();
    }

    ColorModel<T>& model() { return model_; }
    ParameterStore<T>& store() { return store_; }
    std::uint64_t iteration() const { return iteration_; }
    double current_lr() const { return cfg_.lr * std::pow(cfg_.lr_decay, (double)iteration_); }

    // Total teacher-forced nats of one batch (no parameter update).
    double loss_batch(const Batch<T>& batch, bool use_shadow = false) {
        check(batch.size() > 0, "empty batch");
        Tape<T> tape;
        ParamBinder<T> pb(tape, store_, use_shadow, false);
        auto loss = model_.loss(pb, batch.lum_norm, batch.chroma_ctx,
                                batch.targets(model_cfg_.levels));
        return static_cast<double>(loss.cvalue()[0]);
    }

    void resume_from(const std::string& ckpt_path) {
        auto records = load_checkpoint_file(ckpt_path);
        auto meta = apply_checkpoint(store_, records);
        if (meta.count("config_hash")) {
            const std::uint64_t stored = detail::join_u64(meta.at("config_hash"));
            if (stored != config_hash_)
                throw CheckpointError(CkptError::ConfigHashMismatch,
                                      "checkpoint was produced by a different configuration");
        }
        iteration_ = meta.count("iteration") ? (std::uint64_t)meta.at("iteration")[0] : 0;
        data_init_done_ = meta.count("data_init_done") && meta.at("data_init_done")[0] > 0.0;
    }

    // harness-level extras (e.g. the embedded run configuration)
    std::map<std::string, std::vector<double>> extra_meta;

    void save(const std::string& path) const {
        std::map<std::string, std::vector<double>> meta = extra_meta;
        meta["iteration"] = {(double)iteration_};
        meta["data_init_done"] = {data_init_done_ ? 1.0 : 0.0};
        meta["config_hash"] = detail::split_u64(config_hash_);
        meta["root_seed"] = detail::split_u64(cfg_.seed);
        meta["model_kind"] = {model_cfg_.kind == ModelKind::Full ? 0.0 : 1.0};
        save_checkpoint(store_, path, meta);
    }

    Result train(const Dataset& ds, const std::string& out_dir) {
        namespace fs = std::filesystem;
        const auto t0 = std::chrono::steady_clock::now();
        if (!out_dir.empty()) fs::create_directories(out_dir);
        std::ofstream metrics;
        if (!out_dir.empty())
            metrics.open(fs::path(out_dir) / "metrics.jsonl", iteration_ ? std::ios::app : std::ios::trunc);

        const auto train_idx = ds.split_indices(kTrainSplit);
        check(!train_idx.empty(), "training split is empty");
        const std::size_t ipe = (train_idx.size() + cfg_.batch_size - 1) / cfg_.batch_size;
        const std::uint64_t total_iters =
            cfg_.max_iterations ? cfg_.max_iterations : (std::uint64_t)cfg_.epochs * ipe;
        const std::string eval_split =
            ds.split_indices(kHeldoutSplit).empty() ? kTrainSplit : kHeldoutSplit;

        Result res;
        res.eval_split = eval_split;
        AdamConfig<T> adam{(T)cfg_.beta1, (T)cfg_.beta2, (T)cfg_.adam_eps};
        // iteration-capped runs may cycle tiny datasets hundreds of times;
        // cap the epoch-boundary evaluations at ~10 for those
        const std::uint64_t eval_stride =
            cfg_.max_iterations ? std::max<std::uint64_t>(ipe, cfg_.max_iterations / 10) : ipe;

        std::optional<BatchStream<T>> stream;
        std::uint64_t stream_epoch = ~0ull;
        const std::size_t dims_per_image =
            2 * (ds.manifest.resolution / (std::size_t)model_cfg_.subsample) *
            (ds.manifest.resolution / (std::size_t)model_cfg_.subsample);

        while (iteration_ < total_iters) {
            const std::uint64_t epoch = iteration_ / ipe;
            if (!stream || stream_epoch != epoch) {
                stream.emplace(ds, kTrainSplit, cfg_.batch_size,
                               derive_seed(cfg_.seed, "shuffle", epoch), model_cfg_.levels);
                stream_epoch = epoch;
                if (epoch == 0) res.permutation_hash_epoch0 = stream->permutation_hash();
                for (std::uint64_t skip = 0; skip < iteration_ % ipe; ++skip) stream->next();
            }
            auto batch = stream->next();
            check(batch.has_value(), "batch stream exhausted early");

            if (!data_init_done_) {
                run_data_init(*batch);
                data_init_done_ = true;
                if (cfg_.grad_audit) gradient_audit(*batch);
            }

            const double lr = current_lr();
            auto [loss, grads] = forward_backward(*batch);
            if (!std::isfinite(loss))
                throw TrainingError(iteration_, "non-finite loss at iteration " +
                                                    std::to_string(iteration_) +
                                                    "; last-good checkpoint retained");
            bool clipped = false;
            if (cfg_.grad_clip > 0.0) clipped = clip_global_norm(grads, (T)cfg_.grad_clip);
            store_.adam_step(grads, (T)lr, adam);
            store_.polyak_update((T)cfg_.polyak);
            ++iteration_;

            const bool epoch_end = iteration_ % eval_stride == 0 || iteration_ == total_iters;
            double heldout_bpd = std::numeric_limits<double>::quiet_NaN();
            if (epoch_end) {
                heldout_bpd =
                    split_bpd(model_, store_, ds, eval_split, cfg_.batch_size, cfg_.eval_with_polyak);
                res.epochs.push_back({epoch, heldout_bpd, eval_split});
            }
            if (metrics.is_open()) {
                nlohmann::json rec;
                rec["iteration"] = iteration_;
                rec["epoch"] = epoch;
                rec["lr"] = lr;
                rec["train_nats_per_dim"] = loss / (double)(batch->size() * dims_per_image);
                if (std::isfinite(heldout_bpd))
                    rec["heldout_bpd"] = heldout_bpd;
                else
                    rec["heldout_bpd"] = nullptr;
                rec["wallclock_s"] =
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                if (clipped) rec["grad_clipped"] = true;
                metrics << rec.dump() << "\n";
                metrics.flush();
            }
            if (!out_dir.empty()) {
                if (epoch_end)
                    save((fs::path(out_dir) / ("checkpoint_epoch_" + std::to_string(epoch) + ".pic"))
                             .string());
                if ((cfg_.checkpoint_every && iteration_ % cfg_.checkpoint_every == 0) || epoch_end)
                    save((fs::path(out_dir) / "checkpoint_latest.pic").string());
            }
        }

        res.iterations = iteration_;
        res.final_eval_bpd_shadow = split_bpd(model_, store_, ds, eval_split, cfg_.batch_size, true);
        res.final_eval_bpd_raw = split_bpd(model_, store_, ds, eval_split, cfg_.batch_size, false);
        if (!out_dir.empty()) save((fs::path(out_dir) / "checkpoint_final.pic").string());
        return res;
    }

private:
    std::pair<double, std::map<std::string, ArrayND<T>>> forward_backward(const Batch<T>& batch) {
        const std::size_t micro = cfg_.microbatch == 0 ? batch.size() : cfg_.microbatch;
        double total = 0.0;
        std::map<std::string, ArrayND<T>> grads;
        for (const auto& [name, e] : store_.entries()) grads.emplace(name, ArrayND<T>(e.value.shape));
        for (std::size_t lo = 0; lo < batch.size(); lo += micro) {
            auto part = slice_batch(batch, lo, std::min(batch.size(), lo + micro));
            Tape<T> tape;
            ParamBinder<T> pb(tape, store_);
            auto loss = model_.loss(pb, part.lum_norm, part.chroma_ctx, part.targets(model_cfg_.levels));
            total += static_cast<double>(loss.cvalue()[0]);
            tape.backward(loss);
            auto part_grads = pb.grads();
            for (auto& [name, g] : grads) {
                const auto& pg = part_grads.at(name);
                for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += pg.data[i];
            }
        }
        return {total, std::move(grads)};
    }

    static Batch<T> slice_batch(const Batch<T>& b, std::size_t lo, std::size_t hi) {
        if (lo == 0 && hi == b.size()) return b;
        Batch<T> out;
        const std::size_t lsz = b.lum_norm.size() / b.size();
        const std::size_t csz = b.chroma_ctx.size() / b.size();
        const std::size_t psz = b.a_bins.size() / b.size();
        out.lum_norm.shape = {hi - lo, 1, b.lum_norm.shape[2], b.lum_norm.shape[3]};
        out.lum_norm.data.assign(b.lum_norm.data.begin() + (long)(lo * lsz),
                                 b.lum_norm.data.begin() + (long)(hi * lsz));
        out.chroma_ctx.shape = {hi - lo, 2, b.chroma_ctx.shape[2], b.chroma_ctx.shape[3]};
        out.chroma_ctx.data.assign(b.chroma_ctx.data.begin() + (long)(lo * csz),
                                   b.chroma_ctx.data.begin() + (long)(hi * csz));
        out.a_bins.assign(b.a_bins.begin() + (long)(lo * psz), b.a_bins.begin() + (long)(hi * psz));
        out.b_bins.assign(b.b_bins.begin() + (long)(lo * psz), b.b_bins.begin() + (long)(hi * psz));
        out.indices.assign(b.indices.begin() + (long)lo, b.indices.begin() + (long)hi);
        return out;
    }

    void run_data_init(const Batch<T>& batch) {
        const std::size_t micro = std::min<std::size_t>(
            batch.size(), cfg_.microbatch == 0 ? batch.size() : cfg_.microbatch);
        auto part = slice_batch(batch, 0, micro);
        Tape<T> tape;
        ParamBinder<T> pb(tape, store_, false, false);
        pb.init_mode = true;
        model_.forward_params(pb, part.lum_norm, part.chroma_ctx);
        store_.sync_shadows_to_values();
    }

    // Finite-difference spot check of five random parameters against the
    // backward pass; 64-bit runs only.
    void gradient_audit(const Batch<T>& batch) {
        if constexpr (sizeof(T) != 8) return;
        auto probe = slice_batch(batch, 0, std::min<std::size_t>(2, batch.size()));
        auto eval = [&]() {
            Tape<T> tape;
            ParamBinder<T> pb(tape, store_, false, false);
            auto loss =
                model_.loss(pb, probe.lum_norm, probe.chroma_ctx, probe.targets(model_cfg_.levels));
            return static_cast<double>(loss.cvalue()[0]);
        };
        Tape<T> tape;
        ParamBinder<T> pb(tape, store_);
        auto loss = model_.loss(pb, probe.lum_norm, probe.chroma_ctx, probe.targets(model_cfg_.levels));
        tape.backward(loss);
        auto grads = pb.grads();

        std::vector<std::string> names;
        for (const auto& [name, e] : store_.entries()) names.push_back(name);
        Rng rng(derive_seed(cfg_.seed, "grad-audit"));
        const double h = 1e-5;
        for (int probe_i = 0; probe_i < 5; ++probe_i) {
            const auto& name = names[rng.below(names.size())];
            auto& arr = store_.value(name);
            const std::size_t at = rng.below(arr.size());
            const T keep = arr.data[at];
            arr.data[at] = keep + (T)h;
            const double fp = eval();
            arr.data[at] = keep - (T)h;
            const double fm = eval();
            arr.data[at] = keep;
            const double fd = (fp - fm) / (2.0 * h);
            const double ad = (double)grads.at(name).data[at];
            const double rel = std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)});
            if (rel > 1e-4)
                throw TrainingError(iteration_, "gradient audit failed for " + name + "[" +
                                                    std::to_string(at) + "]: rel err " +
                                                    std::to_string(rel));
        }
    }

    static bool clip_global_norm(std::map<std::string, ArrayND<T>>& grads, T clip) {
        T norm2 = T(0);
        for (const auto& [name, g] : grads)
            for (T v : g.data) norm2 += v * v;
        const T norm = std::sqrt(norm2);
        if (norm <= clip) return false;
        const T scale = clip / norm;
        for (auto& [name, g] : grads)
            for (T& v : g.data) v *= scale;
        return true;
    }

    ModelConfig model_cfg_;
    TrainConfig cfg_;
    std::uint64_t config_hash_;
    ParameterStore<T> store_;
    ColorModel<T> model_;
    std::uint64_t iteration_ = 0;
    bool data_init_done_ = false;
};

}  // namespace pic
