#include "bdlab/datasets.hpp"

#include "bdlab/container.hpp"
#include "bdlab/errors.hpp"
#include "bdlab/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace bdlab {

const char* split_name(Split s) {
    return s == Split::train ? "train" : "test";
}

const char* provenance_name(Provenance p) {
    switch (p) {
    case Provenance::mnist: return "mnist";
    case Provenance::synthetic: return "synthetic";
    case Provenance::custom: return "custom";
    }
    return "?";
}

std::span<const float> Dataset::image(std::size_t i) const {
    if (i >= size()) throw IndexError("sample " + std::to_string(i) + " out of range");
    return {pixels.data() + i * image_size(), image_size()};
}

std::span<float> Dataset::image_mut(std::size_t i) {
    if (i >= size()) throw IndexError("sample " + std::to_string(i) + " out of range");
    return {pixels.data() + i * image_size(), image_size()};
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
    if (indices.empty()) throw ContractError("empty batch");
    std::vector<float> out;
    out.reserve(indices.size() * image_size());
    for (std::size_t i : indices) {
        auto img = image(i);
        out.insert(out.end(), img.begin(), img.end());
    }
    return Tensor({indices.size(), channels, height, width}, std::move(out));
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(labels.at(i));
    return out;
}

Tensor Dataset::images() const {
    return Tensor({size(), channels, height, width}, pixels);
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
    Dataset out = *this;
    out.pixels.clear();
    out.labels.clear();
    out.source_index.clear();
    out.pixels.reserve(indices.size() * image_size());
    for (std::size_t i : indices) {
        auto img = image(i);
        out.pixels.insert(out.pixels.end(), img.begin(), img.end());
        out.labels.push_back(labels[i]);
        out.source_index.push_back(source_index.empty() ? i : source_index[i]);
    }
    return out;
}

std::vector<std::size_t> Dataset::indices_of_class(int label) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i)
        if (labels[i] == label) out.push_back(i);
    return out;
}

std::vector<std::size_t> Dataset::indices_not_of_class(int label) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i)
        if (labels[i] != label) out.push_back(i);
    return out;
}

void Dataset::validate() const {
    if (num_classes < 1) throw ValidationError("num_classes must be positive");
    if (pixels.size() != size() * image_size()) {
        throw ValidationError("pixel buffer holds " + std::to_string(pixels.size()) + " values, expected " +
                              std::to_string(size() * image_size()));
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes) {
            throw ValidationError("label " + std::to_string(labels[i]) + " at sample " + std::to_string(i) +
                                  " outside [0, " + std::to_string(num_classes) + ")");
        }
    }
    for (float p : pixels) {
        if (!(p >= 0.0f && p <= 1.0f)) throw ValidationError("pixel value outside [0, 1]");
    }
    if (!source_index.empty() && source_index.size() != size()) {
        throw ValidationError("source_index length does not match sample count");
    }
}

// ---------------------------------------------------------------------------
// IDX

namespace {

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;

std::uint32_t be32(std::span<const std::uint8_t> bytes, std::size_t offset, const char* what) {
    if (bytes.size() < offset + 4) throw FormatError(std::string("truncated IDX header (") + what + ")", bytes.size());
    return (std::uint32_t(bytes[offset]) << 24) | (std::uint32_t(bytes[offset + 1]) << 16) |
           (std::uint32_t(bytes[offset + 2]) << 8) | std::uint32_t(bytes[offset + 3]);
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

} // namespace

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 int num_classes, Split split) {
    const auto img = read_file_bytes(images_path);
    const auto lab = read_file_bytes(labels_path);

    if (be32(img, 0, "image magic") != kIdxImages) throw FormatError("bad IDX image magic", 0);
    const std::uint32_t count = be32(img, 4, "image count");
    const std::uint32_t rows = be32(img, 8, "rows");
    const std::uint32_t cols = be32(img, 12, "cols");
    const std::size_t expected = 16 + std::size_t(count) * rows * cols;
    if (img.size() < expected) throw FormatError("truncated IDX image payload", img.size());
    if (img.size() > expected) throw FormatError("trailing bytes in IDX image file", expected);

    if (be32(lab, 0, "label magic") != kIdxLabels) throw FormatError("bad IDX label magic", 0);
    const std::uint32_t label_count = be32(lab, 4, "label count");
    if (lab.size() < 8 + std::size_t(label_count)) throw FormatError("truncated IDX label payload", lab.size());
    if (lab.size() > 8 + std::size_t(label_count)) throw FormatError("trailing bytes in IDX label file", 8 + label_count);
    if (label_count != count) {
        throw FormatError("image count " + std::to_string(count) + " != label count " + std::to_string(label_count), 4);
    }

    Dataset d;
    d.channels = 1;
    d.height = rows;
    d.width = cols;
    d.num_classes = num_classes;
    d.split = split;
    d.provenance = Provenance::mnist;
    d.pixels.resize(std::size_t(count) * rows * cols);
    for (std::size_t i = 0; i < d.pixels.size(); ++i) d.pixels[i] = static_cast<float>(img[16 + i]) / 255.0f;
    d.labels.resize(count);
    d.source_index.resize(count);
    const std::uint64_t base = split == Split::train ? 0 : (std::uint64_t{1} << 40);
    for (std::size_t i = 0; i < count; ++i) {
        d.labels[i] = lab[8 + i];
        d.source_index[i] = base + i;
    }
    d.validate();
    return d;
}

void save_idx(const Dataset& d, const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
    if (d.channels != 1) throw ContractError("IDX export supports single-channel images only");
    std::vector<std::uint8_t> img;
    img.reserve(16 + d.pixels.size());
    put_be32(img, kIdxImages);
    put_be32(img, static_cast<std::uint32_t>(d.size()));
    put_be32(img, static_cast<std::uint32_t>(d.height));
    put_be32(img, static_cast<std::uint32_t>(d.width));
    for (float p : d.pixels) {
        const float q = std::round(std::clamp(p, 0.0f, 1.0f) * 255.0f);
        img.push_back(static_cast<std::uint8_t>(q));
    }
    std::vector<std::uint8_t> lab;
    put_be32(lab, kIdxLabels);
    put_be32(lab, static_cast<std::uint32_t>(d.size()));
    for (int l : d.labels) {
        if (l < 0 || l > 255) throw ContractError("label does not fit an unsigned byte");
        lab.push_back(static_cast<std::uint8_t>(l));
    }
    write_file_bytes(images_path, img);
    write_file_bytes(labels_path, lab);
}

// ---------------------------------------------------------------------------
// Synthetic generators

namespace {

struct Segment {
    double r0, c0, r1, c1;
};

double distance_to_segment(double r, double c, const Segment& s) {
    const double dr = s.r1 - s.r0, dc = s.c1 - s.c0;
    const double len2 = dr * dr + dc * dc;
    double t = len2 > 0 ? ((r - s.r0) * dr + (c - s.c0) * dc) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double pr = s.r0 + t * dr, pc = s.c0 + t * dc;
    return std::hypot(r - pr, c - pc);
}

std::vector<Segment> class_prototype(int cls, std::size_t side, std::uint64_t task_seed) {
    Rng rng(mix_seed(task_seed, static_cast<std::uint64_t>(cls)));
    const double lo = 0.15 * static_cast<double>(side);
    const double hi = 0.72 * static_cast<double>(side);
    std::vector<Segment> segs(3);
    for (auto& s : segs) {
        s = {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
    }
    return segs;
}

void base_fields(Dataset& d, std::size_t n, std::size_t side, int num_classes, const SynthOptions& opts) {
    d.channels = 1;
    d.height = side;
    d.width = side;
    d.num_classes = num_classes;
    d.split = opts.split;
    d.provenance = Provenance::synthetic;
    d.pixels.assign(n * side * side, 0.0f);
    d.labels.resize(n);
    d.source_index.resize(n);
}

} // namespace

Dataset synth_binary(std::size_t n, std::uint64_t seed, const SynthOptions& opts) {
    if (n < 2) throw ContractError("synth_binary needs n >= 2");
    const std::size_t side = opts.side;
    Dataset d;
    base_fields(d, n, side, 2, opts);
    const double s = static_cast<double>(side);
    const double centers[2][2] = {{0.38 * s, 0.30 * s}, {0.38 * s, 0.70 * s}};
    const double sigma = 0.16 * s;
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t gid = opts.index_offset + i;
        Rng rng(mix_seed(seed, gid));
        const int label = static_cast<int>(i % 2);
        const double cr = centers[label][0] + 0.5 * rng.normal();
        const double cc = centers[label][1] + 0.5 * rng.normal();
        const double amp = rng.uniform(0.6, 1.0);
        auto img = d.image_mut(i);
        for (std::size_t r = 0; r < side; ++r)
            for (std::size_t c = 0; c < side; ++c) {
                const double dr = static_cast<double>(r) - cr, dc = static_cast<double>(c) - cc;
                double v = amp * std::exp(-(dr * dr + dc * dc) / (2 * sigma * sigma)) + opts.noise * rng.normal();
                img[r * side + c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        d.labels[i] = label;
        d.source_index[i] = gid;
    }
    return d;
}

Dataset synth_strokes(std::size_t n, int num_classes, std::uint64_t seed, const SynthOptions& opts) {
    if (num_classes < 2) throw ContractError("synth_strokes needs at least two classes");
    const std::size_t side = opts.side;
    Dataset d;
    base_fields(d, n, side, num_classes, opts);
    std::vector<std::vector<Segment>> protos;
    for (int c = 0; c < num_classes; ++c) protos.push_back(class_prototype(c, side, opts.task_seed));
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t gid = opts.index_offset + i;
        Rng rng(mix_seed(seed, gid));
        const int label = static_cast<int>(i % static_cast<std::size_t>(num_classes));
        const double shift_r = 0.5 * rng.normal(), shift_c = 0.5 * rng.normal();
        std::vector<Segment> segs = protos[label];
        for (auto& s : segs) {
            s.r0 += shift_r + opts.stroke_jitter * rng.normal();
            s.c0 += shift_c + opts.stroke_jitter * rng.normal();
            s.r1 += shift_r + opts.stroke_jitter * rng.normal();
            s.c1 += shift_c + opts.stroke_jitter * rng.normal();
        }
        const double half_width = rng.uniform(0.5, 1.0);
        const double intensity = rng.uniform(0.7, 1.0);
        auto img = d.image_mut(i);
        for (std::size_t r = 0; r < side; ++r)
            for (std::size_t c = 0; c < side; ++c) {
                double ink = 0.0;
                for (const auto& s : segs) {
                    const double dist = distance_to_segment(static_cast<double>(r), static_cast<double>(c), s);
                    ink = std::max(ink, std::clamp(1.0 + half_width - dist, 0.0, 1.0));
                }
                const double v = intensity * ink + opts.noise * rng.normal();
                img[r * side + c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        d.labels[i] = label;
        d.source_index[i] = gid;
    }
    return d;
}

SplitPair synth_strokes_split(std::size_t n_train, std::size_t n_test, int num_classes, std::uint64_t seed,
                              SynthOptions opts) {
    SplitPair out;
    opts.split = Split::train;
    opts.index_offset = 0;
    out.train = synth_strokes(n_train, num_classes, seed, opts);
    opts.split = Split::test;
    opts.index_offset = std::uint64_t{1} << 40;
    out.test = synth_strokes(n_test, num_classes, seed, opts);
    return out;
}

SplitPair synth_binary_split(std::size_t n_train, std::size_t n_test, std::uint64_t seed, SynthOptions opts) {
    SplitPair out;
    opts.split = Split::train;
    opts.index_offset = 0;
    out.train = synth_binary(n_train, seed, opts);
    opts.split = Split::test;
    opts.index_offset = std::uint64_t{1} << 40;
    out.test = synth_binary(n_test, seed, opts);
    return out;
}

Dataset downsample(const Dataset& d, std::size_t factor) {
    if (factor == 0 || d.height % factor != 0 || d.width % factor != 0) {
        throw ConfigError("downsample factor " + std::to_string(factor) + " does not divide " +
                          std::to_string(d.height) + "x" + std::to_string(d.width));
    }
    if (factor == 1) return d;
    Dataset out = d;
    out.height = d.height / factor;
    out.width = d.width / factor;
    out.pixels.assign(d.size() * out.image_size(), 0.0f);
    const float inv = 1.0f / static_cast<float>(factor * factor);
    for (std::size_t n = 0; n < d.size(); ++n)
        for (std::size_t c = 0; c < d.channels; ++c) {
            const float* src = d.pixels.data() + (n * d.channels + c) * d.height * d.width;
            float* dst = out.pixels.data() + (n * d.channels + c) * out.height * out.width;
            for (std::size_t i = 0; i < out.height; ++i)
                for (std::size_t j = 0; j < out.width; ++j) {
                    float acc = 0.0f;
                    for (std::size_t a = 0; a < factor; ++a)
                        for (std::size_t b = 0; b < factor; ++b) acc += src[(i * factor + a) * d.width + j * factor + b];
                    dst[i * out.width + j] = acc * inv;
                }
        }
    return out;
}

void save_dataset(const Dataset& d, const std::filesystem::path& path) {
    nlohmann::json meta;
    meta["kind"] = "dataset";
    meta["num_classes"] = d.num_classes;
    meta["split"] = split_name(d.split);
    meta["provenance"] = provenance_name(d.provenance);
    meta["source_index"] = d.source_index;
    Container c;
    c.metadata = meta.dump();
    c.tensors.push_back({"images", {d.size(), d.channels, d.height, d.width}, d.pixels});
    std::vector<float> labels(d.labels.begin(), d.labels.end());
    c.tensors.push_back({"labels", {d.size()}, std::move(labels)});
    write_container(c, path);
}

Dataset load_dataset(const std::filesystem::path& path) {
    const Container c = read_container(path);
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(c.metadata);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("dataset metadata is not valid JSON: ") + e.what(), 12);
    }
    if (meta.value("kind", "") != "dataset") throw FormatError("container does not hold a dataset", 12);
    const auto& images = c.at("images");
    const auto& labels = c.at("labels");
    if (images.shape.size() != 4 || labels.shape.size() != 1 || labels.shape[0] != images.shape[0]) {
        throw FormatError("dataset tensors have inconsistent shapes", 0);
    }
    Dataset d;
    d.channels = images.shape[1];
    d.height = images.shape[2];
    d.width = images.shape[3];
    d.pixels = images.values;
    for (float l : labels.values) d.labels.push_back(static_cast<int>(l));
    d.num_classes = meta.at("num_classes").get<int>();
    d.split = meta.at("split").get<std::string>() == "train" ? Split::train : Split::test;
    const std::string prov = meta.at("provenance").get<std::string>();
    d.provenance = prov == "mnist" ? Provenance::mnist : prov == "synthetic" ? Provenance::synthetic : Provenance::custom;
    d.source_index = meta.at("source_index").get<std::vector<std::uint64_t>>();
    d.validate();
    return d;
}

} // namespace bdlab
