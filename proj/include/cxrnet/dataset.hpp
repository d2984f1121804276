#pragma once

// Directory ingestion, stratified splitting, per-epoch batch iteration and the
// synthetic stand-in corpus.
//
// Layout: <root>/{NORMAL,PNEUMONIA}/*.pgm, or pre-split
// <root>/{train,val,test}/{NORMAL,PNEUMONIA}/*.pgm. Directory names are
// matched case-insensitively.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "cxrnet/config.hpp"
#include "cxrnet/error.hpp"
#include "cxrnet/imaging.hpp"
#include "cxrnet/rng.hpp"
#include "cxrnet/tensor.hpp"

namespace cxr {

namespace fs = std::filesystem;

enum class Split { unsplit, train, val, test };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
        case Split::unsplit: break;
    }
    return "unsplit";
}

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    if (s == "unsplit") return Split::unsplit;
    fail(ErrorKind::parameter, "unknown split '" + s + "'");
}

struct DatasetEntry {
    std::string path;
    int label = 0;  // 0 = Normal, 1 = Pneumonia
    Split split = Split::unsplit;
};

struct DatasetIndex {
    std::vector<DatasetEntry> entries;
    int skipped = 0;  // files that did not parse as PGM

    std::size_t count(Split s) const {
        return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(),
                                                      [&](const auto& e) { return e.split == s; }));
    }
    std::size_t count_label(int label) const {
        return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(),
                                                      [&](const auto& e) { return e.label == label; }));
    }
};

namespace detail {

inline std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

inline std::optional<fs::path> find_child_dir(const fs::path& dir, const std::string& name) {
    std::error_code ec;
    std::vector<fs::path> hits;
    for (const auto& e : fs::directory_iterator(dir, ec))
        if (e.is_directory() && lower(e.path().filename().string()) == name) hits.push_back(e.path());
    if (hits.empty()) return std::nullopt;
    std::sort(hits.begin(), hits.end());
    return hits.front();
}

inline bool parses_as_pgm(const fs::path& p) {
    try {
        load_pgm(read_file_bytes(p.string()));
        return true;
    } catch (const Error&) {
        return false;
    }
}

inline void scan_class_dirs(const fs::path& dir, Split split, bool both_classes, DatasetIndex& index) {
    static const char* const names[] = {"normal", "pneumonia"};
    for (int label = 0; label < 2; ++label) {
        const auto cls = find_child_dir(dir, names[label]);
        if (!both_classes && !cls) continue;
        require(cls.has_value(), ErrorKind::layout,
                "missing class directory " + (dir / (label ? "PNEUMONIA" : "NORMAL")).string());
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(*cls))
            if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        std::size_t kept = 0;
        for (const auto& f : files) {
            if (!parses_as_pgm(f)) {
                ++index.skipped;
                continue;
            }
            index.entries.push_back({f.string(), label, split});
            ++kept;
        }
        require(kept > 0 || !both_classes, ErrorKind::layout,
                "class directory " + cls->string() + " has no readable images");
    }
}

}  // namespace detail

// With `both_classes` false a missing or empty class directory is tolerated
// (evaluation of single-class sets); at least one image is still required.
inline DatasetIndex scan_directory(const std::string& root, bool both_classes = true) {
    const fs::path base(root);
    require(fs::is_directory(base), ErrorKind::layout, "dataset root " + root + " is not a directory");
    DatasetIndex index;
    const std::pair<const char*, Split> presplit[] = {
        {"train", Split::train}, {"val", Split::val}, {"test", Split::test}};
    bool any = false;
    for (const auto& [name, split] : presplit) {
        if (auto d = detail::find_child_dir(base, name)) {
            any = true;
            detail::scan_class_dirs(*d, split, both_classes, index);
        }
    }
    if (!any) detail::scan_class_dirs(base, Split::unsplit, both_classes, index);
    require(!index.entries.empty(), ErrorKind::layout, "no readable images under " + root);
    return index;
}

struct SplitFractions {
    double train = 0.8, val = 0.1, test = 0.1;
};

// Per class: shuffle with a seeded stream, take floor(n * val) for validation
// and floor(n * test) for test; the remainder goes to train.
inline DatasetIndex split(const DatasetIndex& index, SplitFractions f, std::uint64_t seed) {
    require(std::abs(f.train + f.val + f.test - 1.0) < 1e-9 && f.train >= 0 && f.val >= 0 && f.test >= 0,
            ErrorKind::parameter, "split fractions must be non-negative and sum to 1");
    DatasetIndex out = index;
    for (const auto& e : out.entries)
        require(e.split == Split::unsplit, ErrorKind::split, "split() needs an unsplit index");
    for (int label = 0; label < 2; ++label) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < out.entries.size(); ++i)
            if (out.entries[i].label == label) members.push_back(i);
        if (members.empty()) continue;
        require(members.size() >= 3, ErrorKind::split,
                "class " + std::to_string(label) + " has fewer than 3 entries");
        Rng rng = Rng::derive(seed, {0x5eULL, static_cast<std::uint64_t>(label)});
        rng.shuffle(members);
        const double n = static_cast<double>(members.size());
        const auto n_val = static_cast<std::size_t>(std::floor(n * f.val + 1e-9));
        const auto n_test = static_cast<std::size_t>(std::floor(n * f.test + 1e-9));
        for (std::size_t k = 0; k < members.size(); ++k) {
            Split s = Split::train;
            if (k < n_val) s = Split::val;
            else if (k < n_val + n_test) s = Split::test;
            out.entries[members[k]].split = s;
        }
    }
    return out;
}

inline std::string manifest_text(const DatasetIndex& index) {
    std::string s = "# path\tlabel\tsplit\n";
    for (const auto& e : index.entries)
        s += e.path + "\t" + std::to_string(e.label) + "\t" + split_name(e.split) + "\n";
    return s;
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path);
    out << text;
    require(static_cast<bool>(out), ErrorKind::io, "write failed for " + path);
}

// ---------------------------------------------------------------------------
// Preprocessing

struct Preprocessor {
    int target_size = 150;
    ClaheParams clahe_params;
    std::string order = "clahe,resize";
    AugmentRanges ranges;

    static Preprocessor from(const RunConfig& c) {
        Preprocessor p;
        p.target_size = c.model.input_size;
        p.clahe_params = {c.clahe_tiles_x, c.clahe_tiles_y, c.clahe_clip};
        p.order = c.preprocess_order;
        p.ranges = {c.rotation_range, c.hflip_prob, c.zoom_min, c.zoom_max, c.shear_range};
        return p;
    }

    // The deterministic part: CLAHE and resize in the configured order.
    GrayImage prepare(const GrayImage& img) const {
        if (order == "clahe,resize")
            return resize_bilinear(clahe(img, clahe_params), target_size, target_size);
        GrayImage r = resize_bilinear(img, target_size, target_size);
        if (order == "resize,clahe") return clahe(r, clahe_params);
        return r;
    }
};

template <typename Real>
struct Batch {
    Tensor<Real> inputs;  // [b, 1, s, s]
    Tensor<Real> labels;  // [b]
    std::vector<std::size_t> entry_ids;
};

// Iterates one split. Prepared images are cached after first use; augmentation
// (train split only, when enabled) draws from a stream keyed by
// (seed, epoch, entry index), so batches are identical for any thread count.
template <typename Real = real_t>
class Loader {
public:
    Loader(const DatasetIndex& index, Split which, Preprocessor pre, int batch_size, bool shuffle,
           bool augment, std::uint64_t seed, int threads = 1)
        : index_(&index), pre_(std::move(pre)), batch_size_(batch_size), shuffle_(shuffle),
          augment_(augment), seed_(seed), threads_(std::max(1, threads)) {
        require(batch_size >= 1, ErrorKind::parameter, "batch size must be >= 1");
        for (std::size_t i = 0; i < index.entries.size(); ++i)
            if (index.entries[i].split == which) members_.push_back(i);
        require(!members_.empty(), ErrorKind::iteration,
                std::string("split '") + split_name(which) + "' is empty");
        cache_.resize(index.entries.size());
    }

    std::size_t size() const noexcept { return members_.size(); }
    std::size_t batches_per_epoch() const noexcept {
        return (members_.size() + static_cast<std::size_t>(batch_size_) - 1) / static_cast<std::size_t>(batch_size_);
    }

    std::vector<std::size_t> epoch_order(int epoch) const {
        std::vector<std::size_t> order = members_;
        if (shuffle_) {
            Rng rng = Rng::derive(seed_, {0x5fULL, static_cast<std::uint64_t>(epoch)});
            rng.shuffle(order);
        }
        return order;
    }

    std::vector<Batch<Real>> epoch_batches(int epoch) {
        std::vector<Batch<Real>> out;
        const auto order = epoch_order(epoch);
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size_)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size_));
            out.push_back(make_batch(std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                              order.begin() + static_cast<std::ptrdiff_t>(end)),
                                     epoch));
        }
        return out;
    }

    // Lazily yields the batches of one epoch.
    class EpochCursor {
    public:
        EpochCursor(Loader& l, int epoch) : loader_(l), epoch_(epoch), order_(l.epoch_order(epoch)) {}
        std::optional<Batch<Real>> next() {
            if (pos_ >= order_.size()) return std::nullopt;
            const std::size_t end = std::min(order_.size(), pos_ + static_cast<std::size_t>(loader_.batch_size_));
            std::vector<std::size_t> ids(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                         order_.begin() + static_cast<std::ptrdiff_t>(end));
            pos_ = end;
            return loader_.make_batch(std::move(ids), epoch_);
        }

    private:
        Loader& loader_;
        int epoch_;
        std::vector<std::size_t> order_;
        std::size_t pos_ = 0;
    };

    EpochCursor epoch(int epoch) { return EpochCursor(*this, epoch); }

    Tensor<Real> image_tensor(std::size_t entry, int epoch) {
        const GrayImage& prepared = prepared_image(entry);
        if (!augment_) return normalize<Real>(prepared);
        Rng rng = Rng::derive(seed_, {0xa9ULL, static_cast<std::uint64_t>(epoch), entry});
        return normalize<Real>(apply_augment(prepared, random_augment_params(rng, pre_.ranges)));
    }

private:
    const GrayImage& prepared_image(std::size_t entry) {
        auto& slot = cache_[entry];
        if (!slot) slot = pre_.prepare(read_pgm_file(index_->entries[entry].path));
        return *slot;
    }

    Batch<Real> make_batch(std::vector<std::size_t> ids, int epoch) {
        const Extent b = static_cast<Extent>(ids.size());
        const Extent s = pre_.target_size;
        Batch<Real> batch{Tensor<Real>({b, 1, s, s}, Real(0)), Tensor<Real>({b}, Real(0)), ids};
        auto fill = [&](std::size_t k) {
            const Tensor<Real> t = image_tensor(ids[k], epoch);
            std::copy(t.span().begin(), t.span().end(),
                      batch.inputs.data() + static_cast<Extent>(k) * s * s);
        };
        if (threads_ > 1 && ids.size() > 1) {
            // Fill the cache serially first; workers then only read it.
            for (std::size_t id : ids) prepared_image(id);
            std::vector<std::thread> pool;
            const std::size_t n = ids.size();
            const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads_), n);
            for (std::size_t w = 0; w < workers; ++w)
                pool.emplace_back([&, w] {
                    for (std::size_t k = w; k < n; k += workers) fill(k);
                });
            for (auto& t : pool) t.join();
        } else {
            for (std::size_t k = 0; k < ids.size(); ++k) fill(k);
        }
        for (std::size_t k = 0; k < ids.size(); ++k)
            batch.labels[k] = static_cast<Real>(index_->entries[ids[k]].label);
        return batch;
    }

    const DatasetIndex* index_;
    Preprocessor pre_;
    int batch_size_;
    bool shuffle_;
    bool augment_;
    std::uint64_t seed_;
    int threads_;
    std::vector<std::size_t> members_;
    std::vector<std::optional<GrayImage>> cache_;
};

// ---------------------------------------------------------------------------
// Synthetic corpus: class 0 is low-amplitude noise on a flat background;
// class 1 is the same background (same index, same noise) plus one bright
// Gaussian blob.

struct BlobInfo {
    double cx = 0, cy = 0, sigma = 0;
};

struct SynthImage {
    GrayImage image;
    BlobInfo blob;  // zero sigma for class 0
};

inline constexpr double kSynthBackground = 70.0;
inline constexpr double kSynthNoise = 6.0;
inline constexpr double kSynthBlobPeak = 110.0;

inline SynthImage synth_image(int size, std::uint64_t seed, std::uint64_t index, bool with_blob) {
    require(size >= 8, ErrorKind::parameter, "synthetic image size must be >= 8");
    Rng noise = Rng::derive(seed, {1, index});
    std::vector<double> field(static_cast<std::size_t>(size) * static_cast<std::size_t>(size));
    for (auto& v : field) v = kSynthBackground + kSynthNoise * noise.normal();
    SynthImage out{GrayImage(size, size), {}};
    if (with_blob) {
        Rng shape = Rng::derive(seed, {2, index});
        BlobInfo b;
        b.sigma = shape.uniform(0.08, 0.15) * size;
        b.cx = shape.uniform(0.25, 0.75) * (size - 1);
        b.cy = shape.uniform(0.25, 0.75) * (size - 1);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const double r2 = (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy);
                field[static_cast<std::size_t>(y) * size + x] +=
                    kSynthBlobPeak * std::exp(-r2 / (2 * b.sigma * b.sigma));
            }
        out.blob = b;
    }
    for (std::size_t i = 0; i < field.size(); ++i) out.image.pixels[i] = clamp_round_u8(field[i]);
    return out;
}

struct SynthDataset {
    DatasetIndex index;
    std::vector<BlobInfo> blobs;  // parallel to index.entries
};

inline SynthDataset synth_dataset(int n_per_class, int image_size, std::uint64_t seed, const std::string& out_dir) {
    require(n_per_class >= 4, ErrorKind::parameter, "synthetic dataset needs n_per_class >= 4");
    std::error_code ec;
    const fs::path root(out_dir);
    fs::create_directories(root / "NORMAL", ec);
    fs::create_directories(root / "PNEUMONIA", ec);
    require(fs::is_directory(root / "NORMAL") && fs::is_directory(root / "PNEUMONIA"), ErrorKind::io,
            "cannot create synthetic dataset under " + out_dir);
    SynthDataset ds;
    std::string blob_log = "# path\tcx\tcy\tsigma\n";
    for (int label = 0; label < 2; ++label) {
        for (int i = 0; i < n_per_class; ++i) {
            const SynthImage s = synth_image(image_size, seed, static_cast<std::uint64_t>(i), label == 1);
            char name[64];
            std::snprintf(name, sizeof name, "%s_%04d.pgm", label ? "pneumonia" : "normal", i);
            const fs::path p = root / (label ? "PNEUMONIA" : "NORMAL") / name;
            write_pgm_file(p.string(), s.image);
            ds.index.entries.push_back({p.string(), label, Split::unsplit});
            ds.blobs.push_back(s.blob);
            blob_log += p.string() + "\t" + detail::fmt_value(s.blob.cx) + "\t" + detail::fmt_value(s.blob.cy) +
                        "\t" + detail::fmt_value(s.blob.sigma) + "\n";
        }
    }
    write_text_file((root / "manifest.txt").string(), manifest_text(ds.index));
    write_text_file((root / "blobs.txt").string(), blob_log);
    return ds;
}

}  // namespace cxr
