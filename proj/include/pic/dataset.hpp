#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>

#include "json.hpp"
#include "pic/array.hpp"
#include "pic/mixture.hpp"
#include "pic/png_io.hpp"

namespace pic {

inline const char* kTrainSplit = "train";
inline const char* kHeldoutSplit = "heldout";

// Split assignment is a pure function of the id and the fraction, so it is
// stable across rescans and machines.
inline std::string split_of(const std::string& id, double heldout_fraction) {
    const std::uint64_t h = mix64(fnv1a64(id));
    const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
    return u < heldout_fraction ? kHeldoutSplit : kTrainSplit;
}

struct ManifestEntry {
    std::string id;
    std::string split;
    bool resized = false;
};

struct DatasetManifest {
    std::string root;
    std::size_t resolution = 32;
    int subsample = 2;
    std::size_t warnings = 0;
    std::vector<ManifestEntry> entries;

    std::string to_json() const {
        nlohmann::json j;
        j["root"] = root;
        j["resolution"] = resolution;
        j["subsample"] = subsample;
        j["warnings"] = warnings;
        auto arr = nlohmann::json::array();
        for (const auto& e : entries)
            arr.push_back({{"id", e.id}, {"resized", e.resized}, {"split", e.split}});
        j["entries"] = arr;
        return j.dump(2);
    }
};

// Aspect-preserving center crop followed by bilinear resize.
inline ImageU8 center_crop_resize(const ImageU8& img, std::size_t out_w, std::size_t out_h) {
    check(img.channels == 3 || img.channels == 1, "center_crop_resize: 1 or 3 channels");
    const double want_aspect = static_cast<double>(out_w) / static_cast<double>(out_h);
    std::size_t cw = img.width, ch = img.height;
    if (static_cast<double>(img.width) / static_cast<double>(img.height) > want_aspect)
        cw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(want_aspect * (double)img.height)));
    else
        ch = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround((double)img.width / want_aspect)));
    const std::size_t x0 = (img.width - cw) / 2, y0 = (img.height - ch) / 2;

    ImageU8 out(out_w, out_h, img.channels);
    for (std::size_t c = 0; c < img.channels; ++c) {
        std::vector<double> plane(cw * ch);
        for (std::size_t y = 0; y < ch; ++y)
            for (std::size_t x = 0; x < cw; ++x) plane[y * cw + x] = img.at(y0 + y, x0 + x, c);
        auto resized = labdetail::resize_plane(plane, ch, cw, out_h, out_w, UpsampleMode::Bilinear);
        for (std::size_t i = 0; i < resized.size(); ++i) {
            long v = std::lround(resized[i]);
            out.pixels[i * img.channels + c] = static_cast<std::uint8_t>(std::min(255l, std::max(0l, v)));
        }
    }
    return out;
}

// Desk-scale datasets are held in memory as decoded 8-bit RGB images.
class Dataset {
public:
    DatasetManifest manifest;
    std::vector<ImageU8> images;  // aligned with manifest.entries
    std::vector<int> labels;      // CIFAR metadata; unused by training

    std::vector<std::size_t> split_indices(const std::string& split) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < manifest.entries.size(); ++i)
            if (manifest.entries[i].split == split) out.push_back(i);
        return out;
    }

    static Dataset in_memory(std::vector<ImageU8> imgs, const std::string& id_prefix,
                             std::size_t resolution, int subsample, double heldout_fraction) {
        Dataset ds;
        ds.manifest.root = "<memory>";
        ds.manifest.resolution = resolution;
        ds.manifest.subsample = subsample;
        for (std::size_t i = 0; i < imgs.size(); ++i) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%s%05zu", id_prefix.c_str(), i);
            ManifestEntry e;
            e.id = buf;
            e.split = split_of(e.id, heldout_fraction);
            check(imgs[i].width == resolution && imgs[i].height == resolution,
                  "in-memory image does not match dataset resolution");
            ds.manifest.entries.push_back(e);
        }
        ds.images = std::move(imgs);
        return ds;
    }
};

// Recursively lists PNGs under root (deterministic path order), decoding and
// conforming each to the target resolution; unreadable files are skipped and
// counted in the manifest.
inline Dataset scan_folder(const std::string& root, std::size_t resolution, int subsample,
                           double heldout_fraction) {
    namespace fs = std::filesystem;
    check(fs::exists(root), "dataset folder does not exist: " + root);
    std::vector<std::string> paths;
    for (const auto& p : fs::recursive_directory_iterator(root)) {
        if (!p.is_regular_file()) continue;
        std::string ext = p.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (ext == ".png") paths.push_back(fs::relative(p.path(), root).string());
    }
    std::sort(paths.begin(), paths.end());
    check(!paths.empty(), "no PNG files under " + root);

    Dataset ds;
    ds.manifest.root = root;
    ds.manifest.resolution = resolution;
    ds.manifest.subsample = subsample;
    for (const auto& rel : paths) {
        ImageU8 img;
        try {
            img = read_png((fs::path(root) / rel).string());
        } catch (const PngError&) {
            ++ds.manifest.warnings;
            continue;
        }
        if (img.channels == 1) {  // promote grayscale to RGB for training data
            ImageU8 rgb(img.width, img.height, 3);
            for (std::size_t i = 0; i < img.pixels.size(); ++i)
                rgb.pixels[3 * i] = rgb.pixels[3 * i + 1] = rgb.pixels[3 * i + 2] = img.pixels[i];
            img = std::move(rgb);
        }
        ManifestEntry e;
        e.id = rel;
        e.split = split_of(rel, heldout_fraction);
        if (img.width != resolution || img.height != resolution) {
            img = center_crop_resize(img, resolution, resolution);
            e.resized = true;
        }
        ds.manifest.entries.push_back(e);
        ds.images.push_back(std::move(img));
    }
    return ds;
}

// CIFAR-10 binary batches: 3073-byte records, one label byte then 1024-byte
// R, G, B planes in row-major 32x32 order.
inline Dataset read_cifar10_binary(const std::vector<std::string>& files, double heldout_fraction) {
    Dataset ds;
    ds.manifest.root = files.empty() ? "" : files.front();
    ds.manifest.resolution = 32;
    constexpr std::size_t kRecord = 3073;
    for (const auto& file : files) {
        std::ifstream in(file, std::ios::binary);
        check(in.good(), "cannot open CIFAR batch: " + file);
        std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        if (bytes.size() % kRecord != 0)
            throw std::invalid_argument("CIFAR batch " + file + " has invalid length " +
                                        std::to_string(bytes.size()) + " (residue " +
                                        std::to_string(bytes.size() % kRecord) + " bytes)");
        const std::size_t n = bytes.size() / kRecord;
        const std::string base = std::filesystem::path(file).filename().string();
        for (std::size_t r = 0; r < n; ++r) {
            const auto* rec = reinterpret_cast<const std::uint8_t*>(bytes.data()) + r * kRecord;
            ds.labels.push_back(rec[0]);
            ImageU8 img(32, 32, 3);
            for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t y = 0; y < 32; ++y)
                    for (std::size_t x = 0; x < 32; ++x)
                        img.at(y, x, c) = rec[1 + c * 1024 + y * 32 + x];
            ManifestEntry e;
            e.id = base + "#" + std::to_string(r);
            e.split = split_of(e.id, heldout_fraction);
            ds.manifest.entries.push_back(e);
            ds.images.push_back(std::move(img));
        }
    }
    return ds;
}

// A training batch: normalized luminance, causal chroma context (bin
// centers) and the quantized targets.
template <class T>
struct Batch {
    ArrayND<T> lum_norm;    // [N,1,H,W]
    ArrayND<T> chroma_ctx;  // [N,2,H/f,W/f]
    std::vector<int> a_bins, b_bins;
    std::vector<std::size_t> indices;

    std::size_t size() const { return lum_norm.shape[0]; }

    BatchTargets targets(int levels) const { return BatchTargets::from_bins(a_bins, b_bins, levels); }
};

template <class T>
Batch<T> assemble_batch(const Dataset& ds, const std::vector<std::size_t>& indices, int factor,
                        int levels) {
    const std::size_t res = ds.manifest.resolution;
    const std::size_t n = indices.size();
    const std::size_t ch = res / static_cast<std::size_t>(factor);
    Batch<T> batch;
    batch.indices = indices;
    batch.lum_norm = ArrayND<T>({n, 1, res, res});
    batch.chroma_ctx = ArrayND<T>({n, 2, ch, ch});
    batch.a_bins.resize(n * ch * ch);
    batch.b_bins.resize(n * ch * ch);
    ChromaAlphabet ab{levels};
    for (std::size_t i = 0; i < n; ++i) {
        const ImageU8& img = ds.images[indices[i]];
        auto lab = subsample_chroma(rgb_to_lab(img), factor);
        for (std::size_t p = 0; p < res * res; ++p)
            batch.lum_norm.data[i * res * res + p] = static_cast<T>(lab.L[p] / 50.0 - 1.0);
        for (std::size_t p = 0; p < ch * ch; ++p) {
            const int abin = ab.quantize(ChromaAlphabet::normalize_a(lab.a[p]));
            const int bbin = ab.quantize(ChromaAlphabet::normalize_b(lab.b[p]));
            batch.a_bins[i * ch * ch + p] = abin;
            batch.b_bins[i * ch * ch + p] = bbin;
            batch.chroma_ctx.data[(i * 2 + 0) * ch * ch + p] = static_cast<T>(ab.dequantize(abin));
            batch.chroma_ctx.data[(i * 2 + 1) * ch * ch + p] = static_cast<T>(ab.dequantize(bbin));
        }
    }
    return batch;
}

// One epoch of batches over a split, in a seed-derived permutation; the
// final partial batch is emitted.
template <class T>
class BatchStream {
public:
    BatchStream(const Dataset& ds, std::string split, std::size_t batch_size, std::uint64_t epoch_seed,
                int levels)
        : ds_(&ds), batch_size_(batch_size), levels_(levels) {
        check(batch_size >= 1, "batch size must be >= 1");
        order_ = ds.split_indices(split);
        check(!order_.empty(), "empty split: " + split);
        Rng rng(epoch_seed);
        rng.shuffle(order_);
    }

    std::optional<Batch<T>> next() {
        if (cursor_ >= order_.size()) return std::nullopt;
        const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
        std::vector<std::size_t> idx(order_.begin() + static_cast<long>(cursor_),
                                     order_.begin() + static_cast<long>(end));
        cursor_ = end;
        return assemble_batch<T>(*ds_, idx, ds_->manifest.subsample, levels_);
    }

    std::size_t batches_per_epoch() const {
        return (order_.size() + batch_size_ - 1) / batch_size_;
    }

    // fingerprint of the permutation, for the ablation data-order audit
    std::uint64_t permutation_hash() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (std::size_t v : order_) h = mix64(h ^ v);
        return h;
    }

    const std::vector<std::size_t>& order() const { return order_; }

private:
    const Dataset* ds_;
    std::size_t batch_size_;
    int levels_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

}  // namespace pic
