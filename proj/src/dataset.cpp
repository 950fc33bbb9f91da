#include "cag/dataset.hpp"

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <stdexcept>

#include <zlib.h>

#include "cag/image.hpp"

namespace cag {

Tensor gather_rows(const Tensor& t, const std::vector<Index>& indices) {
    const Index N = t.dim(0), per = N ? t.size() / N : 0;
    Shape shape = t.shape();
    shape[0] = static_cast<Index>(indices.size());
    Tensor out(shape);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const Index src = indices[i];
        if (src < 0 || src >= N) throw std::out_of_range("row index " + std::to_string(src) + " out of range");
        std::copy(t.data() + src * per, t.data() + (src + 1) * per, out.data() + static_cast<Index>(i) * per);
    }
    return out;
}

LabeledImages LabeledImages::subset(const std::vector<Index>& indices) const {
    LabeledImages out;
    out.images = gather_rows(images, indices);
    out.num_classes = num_classes;
    out.class_names = class_names;
    for (Index i : indices) out.labels.push_back(labels[static_cast<std::size_t>(i)]);
    return out;
}

std::vector<Index> LabeledImages::indices_of(int class_id) const {
    std::vector<Index> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == class_id) idx.push_back(static_cast<Index>(i));
    return idx;
}

Tensor LabeledImages::class_images(int class_id) const { return gather_rows(images, indices_of(class_id)); }

Tensor LabeledImages::rows(Index begin, Index count) const {
    std::vector<Index> idx(static_cast<std::size_t>(count));
    for (Index i = 0; i < count; ++i) idx[static_cast<std::size_t>(i)] = begin + i;
    return gather_rows(images, idx);
}

namespace {

std::vector<unsigned char> read_maybe_gzip(const std::filesystem::path& path) {
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (!f) throw std::runtime_error("cannot open " + path.string());
    std::vector<unsigned char> out;
    unsigned char buf[1 << 16];
    int n = 0;
    while ((n = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
    const bool failed = n < 0;
    gzclose(f);
    if (failed) throw std::runtime_error("decompression failed for " + path.string());
    return out;
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
    if (off + 4 > b.size()) throw std::runtime_error("IDX header truncated");
    return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
           std::uint32_t{b[off + 3]};
}

std::filesystem::path first_existing(const std::filesystem::path& dir, std::initializer_list<const char*> names) {
    for (const char* n : names) {
        if (std::filesystem::exists(dir / n)) return dir / n;
        if (std::filesystem::exists(dir / (std::string(n) + ".gz"))) return dir / (std::string(n) + ".gz");
    }
    throw std::runtime_error("none of the expected files found in " + dir.string());
}

}  // namespace

const std::vector<std::string>& digit_names() {
    static const std::vector<std::string> names = {"zero", "one", "two",   "three", "four",
                                                   "five", "six", "seven", "eight", "nine"};
    return names;
}

LabeledImages load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
    const auto ib = read_maybe_gzip(images);
    const auto lb = read_maybe_gzip(labels);
    if (be32(ib, 0) != 2051) throw std::runtime_error(images.string() + ": not an IDX image file");
    if (be32(lb, 0) != 2049) throw std::runtime_error(labels.string() + ": not an IDX label file");
    const Index n = be32(ib, 4), h = be32(ib, 8), w = be32(ib, 12);
    if (be32(lb, 4) != n) throw std::runtime_error("IDX image/label counts differ");
    if (ib.size() < static_cast<std::size_t>(16 + n * h * w) || lb.size() < static_cast<std::size_t>(8 + n))
        throw std::runtime_error("IDX payload truncated");
    LabeledImages out;
    out.images = Tensor({n, 1, h, w});
    for (Index i = 0; i < n * h * w; ++i) out.images[i] = ib[static_cast<std::size_t>(16 + i)] / 255.0;
    int max_label = 0;
    for (Index i = 0; i < n; ++i) {
        out.labels.push_back(lb[static_cast<std::size_t>(8 + i)]);
        max_label = std::max(max_label, out.labels.back());
    }
    out.num_classes = max_label + 1;
    if (out.num_classes <= 10) out.class_names.assign(digit_names().begin(), digit_names().begin() + out.num_classes);
    return out;
}

LabeledImages load_mnist(const std::filesystem::path& dir, Split split) {
    const bool train = split == Split::train;
    LabeledImages d = load_idx(
        first_existing(dir, {train ? "train-images-idx3-ubyte" : "t10k-images-idx3-ubyte",
                             train ? "train-images.idx3-ubyte" : "t10k-images.idx3-ubyte"}),
        first_existing(dir, {train ? "train-labels-idx1-ubyte" : "t10k-labels-idx1-ubyte",
                             train ? "train-labels.idx1-ubyte" : "t10k-labels.idx1-ubyte"}));
    d.num_classes = 10;
    d.class_names = digit_names();
    return d;
}

LabeledImages load_cifar10(const std::filesystem::path& dir, Split split) {
    std::vector<std::filesystem::path> files;
    if (split == Split::train)
        for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    else
        files.push_back(dir / "test_batch.bin");
    constexpr Index rec = 1 + 3 * 32 * 32;
    std::vector<unsigned char> all;
    for (const auto& f : files) {
        std::ifstream is(f, std::ios::binary);
        if (!is) throw std::runtime_error("cannot open " + f.string());
        all.insert(all.end(), std::istreambuf_iterator<char>(is), {});
    }
    if (all.size() % rec) throw std::runtime_error("CIFAR-10 payload is not a whole number of records");
    const Index n = static_cast<Index>(all.size()) / rec;
    LabeledImages out;
    out.images = Tensor({n, 3, 32, 32});
    for (Index i = 0; i < n; ++i) {
        out.labels.push_back(all[static_cast<std::size_t>(i * rec)]);
        for (Index p = 0; p < rec - 1; ++p) out.images[i * (rec - 1) + p] = all[static_cast<std::size_t>(i * rec + 1 + p)] / 255.0;
    }
    out.num_classes = 10;
    out.class_names = {"airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"};
    return out;
}

LabeledImages load_image_folder(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> classes;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_directory()) classes.push_back(e.path());
    std::sort(classes.begin(), classes.end());
    if (classes.empty()) throw std::runtime_error(dir.string() + " has no class sub-directories");
    std::vector<Tensor> imgs;
    LabeledImages out;
    for (std::size_t c = 0; c < classes.size(); ++c) {
        out.class_names.push_back(classes[c].filename().string());
        std::vector<std::filesystem::path> files;
        for (const auto& e : std::filesystem::directory_iterator(classes[c]))
            if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            imgs.push_back(read_png(f));
            out.labels.push_back(static_cast<int>(c));
        }
    }
    if (imgs.empty()) throw std::runtime_error(dir.string() + " contains no PNG images");
    const Shape s = imgs.front().shape();
    const Index per = imgs.front().size();
    out.images = Tensor({static_cast<Index>(imgs.size()), s[0], s[1], s[2]});
    for (std::size_t i = 0; i < imgs.size(); ++i) {
        if (imgs[i].shape() != s) throw std::runtime_error("image folder mixes image shapes");
        std::copy(imgs[i].data(), imgs[i].data() + per, out.images.data() + static_cast<Index>(i) * per);
    }
    out.num_classes = static_cast<int>(classes.size());
    return out;
}

LabeledImages load_dataset(const std::string& spec, Split split) {
    const auto colon = spec.find(':');
    const std::string kind = colon == std::string::npos ? "" : spec.substr(0, colon);
    const std::string path = colon == std::string::npos ? spec : spec.substr(colon + 1);
    if (kind == "mnist" || kind.empty()) return load_mnist(path, split);
    if (kind == "cifar10") return load_cifar10(path, split);
    if (kind == "folder") return load_image_folder(path);
    throw std::invalid_argument("unknown dataset kind '" + kind + "' (expected mnist, cifar10 or folder)");
}

}  // namespace cag
