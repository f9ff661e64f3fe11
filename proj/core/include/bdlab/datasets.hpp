#pragma once

#include "bdlab/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace bdlab {

enum class Split { train, test };
enum class Provenance { mnist, synthetic, custom };

const char* split_name(Split s);
const char* provenance_name(Provenance p);

// Image classification data, N x C x H x W, pixels in [0, 1]. Immutable by
// convention once built; every transform returns a new Dataset.
struct Dataset {
    std::size_t channels = 1;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> pixels;
    std::vector<int> labels;
    int num_classes = 0;
    Split split = Split::train;
    Provenance provenance = Provenance::custom;
    // Global sample ids; train and test splits never share one.
    std::vector<std::uint64_t> source_index;

    std::size_t size() const { return labels.size(); }
    std::size_t image_size() const { return channels * height * width; }
    Shape image_shape() const { return {channels, height, width}; }

    std::span<const float> image(std::size_t i) const;
    std::span<float> image_mut(std::size_t i);

    // [B x C x H x W] copy of the selected samples.
    Tensor batch(std::span<const std::size_t> indices) const;
    std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
    Tensor images() const;

    Dataset subset(std::span<const std::size_t> indices) const;
    std::vector<std::size_t> indices_of_class(int label) const;
    std::vector<std::size_t> indices_not_of_class(int label) const;

    // Throws ValidationError when labels or pixels are out of range.
    void validate() const;
};

// IDX (big-endian) reader: 0x00000803 image files, 0x00000801 label files.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 int num_classes = 10, Split split = Split::train);
// Pixels are quantized to round(255 * p).
void save_idx(const Dataset& d, const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

struct SynthOptions {
    std::size_t side = 16;
    Split split = Split::train;
    // Global id of the first generated sample; sample i draws from a stream
    // keyed by (seed, index_offset + i).
    std::uint64_t index_offset = 0;
    double noise = 0.08;
    // Per-sample displacement of the class strokes, in pixels (std. dev.).
    double stroke_jitter = 0.8;
    // Fixes the class prototypes; seed only varies the samples.
    std::uint64_t task_seed = 2024;
};

// Two Gaussian-blob classes; label of sample i is i % 2.
Dataset synth_binary(std::size_t n, std::uint64_t seed, const SynthOptions& opts = {});

// Handwriting-like stroke classes with a dark lower border, the desk-scale
// stand-in for MNIST. Label of sample i is i % num_classes.
Dataset synth_strokes(std::size_t n, int num_classes, std::uint64_t seed, const SynthOptions& opts = {});

struct SplitPair {
    Dataset train;
    Dataset test;
};

// Train/test pair with disjoint sample ids (test ids start at 2^40).
SplitPair synth_strokes_split(std::size_t n_train, std::size_t n_test, int num_classes, std::uint64_t seed,
                              SynthOptions opts = {});
SplitPair synth_binary_split(std::size_t n_train, std::size_t n_test, std::uint64_t seed, SynthOptions opts = {});

// Average pooling by an integer factor; labels unchanged.
Dataset downsample(const Dataset& d, std::size_t factor);

// Dataset cache in the checkpoint container format.
void save_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

} // namespace bdlab
