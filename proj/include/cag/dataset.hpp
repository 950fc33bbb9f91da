#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cag/tensor.hpp"

namespace cag {

struct LabeledImages {
    Tensor images;  // [N,C,H,W] in [0,1]
    std::vector<int> labels;
    int num_classes = 0;
    std::vector<std::string> class_names;

    Index size() const { return static_cast<Index>(labels.size()); }
    Index channels() const { return images.dim(1); }
    Index resolution() const { return images.dim(2); }

    LabeledImages subset(const std::vector<Index>& indices) const;
    std::vector<Index> indices_of(int class_id) const;
    Tensor class_images(int class_id) const;
    Tensor rows(Index begin, Index count) const;
};

// Gathers rows of a [N,...] tensor.
Tensor gather_rows(const Tensor& t, const std::vector<Index>& indices);

// IDX (optionally gzip-compressed) image/label pair.
LabeledImages load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

enum class Split { train, test };
// Standard MNIST file names inside `dir` (train-*/t10k-*, with or without .gz).
LabeledImages load_mnist(const std::filesystem::path& dir, Split split);
// CIFAR-10 binary batches (data_batch_{1..5}.bin / test_batch.bin).
LabeledImages load_cifar10(const std::filesystem::path& dir, Split split);
// One sub-directory per class, sorted by name; PNG files inside.
LabeledImages load_image_folder(const std::filesystem::path& dir);

// "mnist:<dir>", "cifar10:<dir>", "folder:<dir>", or a bare directory (MNIST layout if present).
LabeledImages load_dataset(const std::string& spec, Split split);

// English digit names, used as captions for the dual encoder.
const std::vector<std::string>& digit_names();

}  // namespace cag
