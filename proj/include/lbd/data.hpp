#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "lbd/errors.hpp"
#include "lbd/rng.hpp"
#include "lbd/tensor.hpp"

namespace lbd {

/// Images in [0,1], NCHW, with per-sample identities so split disjointness
/// can be checked as set intersection.
struct LabeledDataset {
    Tensor images;  // [n, c, h, w]
    std::vector<int> labels;
    std::vector<int64_t> ids;
    int class_count = 0;

    int size() const { return images.defined() ? images.dim(0) : 0; }

    std::vector<int> image_shape() const {
        return {images.dim(1), images.dim(2), images.dim(3)};
    }
};

inline Tensor gather_images(const Tensor& images, const std::vector<size_t>& idx) {
    int64_t per = images.size() / images.dim(0);
    std::vector<int> shape = images.shape();
    shape[0] = static_cast<int>(idx.size());
    Tensor out(shape);
    double* op = out.mutable_data();
    const double* ip = images.data();
    for (size_t r = 0; r < idx.size(); ++r)
        std::copy_n(ip + static_cast<int64_t>(idx[r]) * per, per,
                    op + static_cast<int64_t>(r) * per);
    return out;
}

inline LabeledDataset subset(const LabeledDataset& ds, const std::vector<size_t>& idx) {
    LabeledDataset out;
    out.images = gather_images(ds.images, idx);
    out.labels.reserve(idx.size());
    out.ids.reserve(idx.size());
    for (size_t i : idx) {
        out.labels.push_back(ds.labels[i]);
        out.ids.push_back(ds.ids[i]);
    }
    out.class_count = ds.class_count;
    return out;
}

inline LabeledDataset concat(const LabeledDataset& a, const LabeledDataset& b) {
    if (a.size() == 0) return b;
    if (b.size() == 0) return a;
    if (a.image_shape() != b.image_shape())
        throw ShapeError("shape-mismatch: concat image shapes differ");
    std::vector<int> shape = a.images.shape();
    shape[0] = a.size() + b.size();
    Tensor imgs(shape);
    double* p = imgs.mutable_data();
    std::copy_n(a.images.data(), a.images.size(), p);
    std::copy_n(b.images.data(), b.images.size(), p + a.images.size());
    LabeledDataset out;
    out.images = imgs;
    out.labels = a.labels;
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
    out.ids = a.ids;
    out.ids.insert(out.ids.end(), b.ids.begin(), b.ids.end());
    out.class_count = std::max(a.class_count, b.class_count);
    return out;
}

inline std::vector<size_t> indices_with_label(const LabeledDataset& ds, int label) {
    std::vector<size_t> idx;
    for (size_t i = 0; i < ds.labels.size(); ++i)
        if (ds.labels[i] == label) idx.push_back(i);
    return idx;
}

inline bool datasets_disjoint(const std::vector<const LabeledDataset*>& sets) {
    std::set<int64_t> seen;
    for (const auto* ds : sets)
        for (int64_t id : ds->ids)
            if (!seen.insert(id).second) return false;
    return true;
}

// ---- IDX ingestion -----------------------------------------------------------

namespace detail {

inline uint32_t read_be32(const unsigned char* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

inline std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    f.seekg(0, std::ios::end);
    auto len = f.tellg();
    f.seekg(0);
    std::vector<unsigned char> buf(static_cast<size_t>(len));
    f.read(reinterpret_cast<char*>(buf.data()), len);
    if (!f) throw IoError("read failed for " + path);
    return buf;
}

}  // namespace detail

constexpr uint32_t kIdxImagesMagic = 0x00000803;
constexpr uint32_t kIdxLabelsMagic = 0x00000801;

/// Reads an IDX image/label file pair. Pixels are scaled by 1/255 into [0,1].
/// Sample ids are id_base + position; pass distinct bases for distinct
/// sources so disjointness checks stay meaningful.
inline LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path,
                               int64_t id_base = 0) {
    auto ibuf = detail::read_file(images_path);
    auto lbuf = detail::read_file(labels_path);
    if (ibuf.size() < 16 || lbuf.size() < 8) throw FormatError("truncated-file: IDX header");
    uint32_t imagic = detail::read_be32(ibuf.data());
    uint32_t lmagic = detail::read_be32(lbuf.data());
    if (imagic != kIdxImagesMagic)
        throw FormatError("bad-magic: expected image magic 0x803 in " + images_path);
    if (lmagic != kIdxLabelsMagic)
        throw FormatError("bad-magic: expected label magic 0x801 in " + labels_path);
    uint32_t n = detail::read_be32(ibuf.data() + 4);
    uint32_t rows = detail::read_be32(ibuf.data() + 8);
    uint32_t cols = detail::read_be32(ibuf.data() + 12);
    uint32_t ln = detail::read_be32(lbuf.data() + 4);
    if (n != ln)
        throw DataError("count-mismatch: " + std::to_string(n) + " images vs " +
                        std::to_string(ln) + " labels");
    size_t need = 16 + static_cast<size_t>(n) * rows * cols;
    if (ibuf.size() < need) throw FormatError("truncated-file: " + images_path);
    if (lbuf.size() < 8 + n) throw FormatError("truncated-file: " + labels_path);
    if (n == 0) throw DataError("empty dataset in " + images_path);

    LabeledDataset ds;
    ds.images = Tensor({static_cast<int>(n), 1, static_cast<int>(rows), static_cast<int>(cols)});
    double* p = ds.images.mutable_data();
    const unsigned char* src = ibuf.data() + 16;
    int64_t total = static_cast<int64_t>(n) * rows * cols;
    for (int64_t i = 0; i < total; ++i) p[i] = src[i] / 255.0;
    ds.labels.resize(n);
    ds.ids.resize(n);
    int maxl = 0;
    for (uint32_t i = 0; i < n; ++i) {
        ds.labels[i] = lbuf[8 + i];
        ds.ids[i] = id_base + i;
        maxl = std::max(maxl, ds.labels[i]);
    }
    ds.class_count = maxl + 1;
    return ds;
}

/// Writes the IDX pair back out (big-endian headers, raw bytes). Used for
/// fixtures and for exporting synthetic data.
inline void save_idx(const LabeledDataset& ds, const std::string& images_path,
                     const std::string& labels_path) {
    auto put_be32 = [](std::ofstream& f, uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
        f.write(reinterpret_cast<char*>(b), 4);
    };
    if (ds.images.dim(1) != 1) throw ShapeError("save_idx supports single-channel images");
    std::ofstream fi(images_path, std::ios::binary);
    if (!fi) throw IoError("cannot write " + images_path);
    put_be32(fi, kIdxImagesMagic);
    put_be32(fi, static_cast<uint32_t>(ds.size()));
    put_be32(fi, static_cast<uint32_t>(ds.images.dim(2)));
    put_be32(fi, static_cast<uint32_t>(ds.images.dim(3)));
    const double* p = ds.images.data();
    for (int64_t i = 0; i < ds.images.size(); ++i) {
        double v = std::min(1.0, std::max(0.0, p[i]));
        fi.put(static_cast<char>(static_cast<int>(v * 255.0 + 0.5)));
    }
    std::ofstream fl(labels_path, std::ios::binary);
    if (!fl) throw IoError("cannot write " + labels_path);
    put_be32(fl, kIdxLabelsMagic);
    put_be32(fl, static_cast<uint32_t>(ds.size()));
    for (int l : ds.labels) fl.put(static_cast<char>(l));
    if (!fi || !fl) throw IoError("write failed");
}

// ---- the four-way attack split -----------------------------------------------

/// The attacker/victim data layout: X_target and X_nontarget feed teacher-side
/// infection, X_student trains the victim model, X_eval measures the attack.
/// student_test is the held-out student-domain pool for clean accuracy.
struct DataSplit {
    int target_label = 0;          // label in the source label space
    int student_target_index = 0;  // y_t's index in the student label space
    std::vector<int> teacher_classes;  // source labels kept by the teacher task
    std::vector<int> student_classes;  // source labels forming the student task
    LabeledDataset X_target;
    LabeledDataset X_nontarget;
    LabeledDataset X_student;
    LabeledDataset X_eval;
    LabeledDataset student_test;

    int student_label_of(int source_label) const {
        for (size_t i = 0; i < student_classes.size(); ++i)
            if (student_classes[i] == source_label) return static_cast<int>(i);
        throw DataError("label not in student task");
    }

    int source_label_of_student(int student_label) const {
        return student_classes.at(static_cast<size_t>(student_label));
    }
};

namespace detail {

inline LabeledDataset relabeled(LabeledDataset ds, const std::vector<int>& classes) {
    for (auto& l : ds.labels) {
        auto it = std::find(classes.begin(), classes.end(), l);
        if (it == classes.end()) throw DataError("label outside class list during relabel");
        l = static_cast<int>(it - classes.begin());
    }
    ds.class_count = static_cast<int>(classes.size());
    return ds;
}

}  // namespace detail

/// Builds the digit-task split: teacher keeps classes 0-4, student takes 5-9
/// (relabeled 0-4). X_target is `target_count` samples of y_t drawn from the
/// train pool and removed from X_student; X_eval comes from the held-out test
/// pool of the teacher classes, never from student data.
inline DataSplit make_digit_split(const LabeledDataset& train, const LabeledDataset& test,
                                  int target_label, int target_count, int eval_count,
                                  uint64_t seed) {
    if (target_label < 5 || target_label > 9)
        throw DataError("target label must be a student-task class (5..9)");
    if (target_count < 1) throw DataError("target count must be positive");
    if (!datasets_disjoint({&train, &test}))
        throw DataError("train/test pools share sample ids");

    DataSplit sp;
    sp.target_label = target_label;
    sp.teacher_classes = {0, 1, 2, 3, 4};
    sp.student_classes = {5, 6, 7, 8, 9};
    sp.student_target_index = sp.student_label_of(target_label);

    Rng rng(seed);

    auto target_pool = indices_with_label(train, target_label);
    if (static_cast<int>(target_pool.size()) < target_count)
        throw DataError("insufficient-target-samples: have " +
                        std::to_string(target_pool.size()) + ", need " +
                        std::to_string(target_count));
    rng.shuffle(target_pool);
    std::vector<size_t> target_idx(target_pool.begin(), target_pool.begin() + target_count);
    std::sort(target_idx.begin(), target_idx.end());
    sp.X_target = subset(train, target_idx);

    std::set<size_t> taken(target_idx.begin(), target_idx.end());
    std::vector<size_t> nontarget_idx, student_idx;
    for (size_t i = 0; i < train.labels.size(); ++i) {
        int l = train.labels[i];
        if (l <= 4)
            nontarget_idx.push_back(i);
        else if (!taken.count(i))
            student_idx.push_back(i);
    }
    sp.X_nontarget = detail::relabeled(subset(train, nontarget_idx), sp.teacher_classes);
    sp.X_student = detail::relabeled(subset(train, student_idx), sp.student_classes);

    std::vector<size_t> eval_pool, student_test_idx;
    for (size_t i = 0; i < test.labels.size(); ++i) {
        if (test.labels[i] <= 4)
            eval_pool.push_back(i);
        else
            student_test_idx.push_back(i);
    }
    if (static_cast<int>(eval_pool.size()) < eval_count)
        throw DataError("insufficient samples for X_eval: have " +
                        std::to_string(eval_pool.size()));
    rng.shuffle(eval_pool);
    eval_pool.resize(static_cast<size_t>(eval_count));
    std::sort(eval_pool.begin(), eval_pool.end());
    sp.X_eval = detail::relabeled(subset(test, eval_pool), sp.teacher_classes);
    sp.student_test = detail::relabeled(subset(test, student_test_idx), sp.student_classes);
    return sp;
}

// ---- synthetic data ------------------------------------------------------------

// Blob centers on a 28x28 canvas, scaled for other sizes. Classes 0-4 sit in
// the upper/central area (teacher task), 5-9 lower/outer (student task); all
// clear of the bottom-right trigger corner.
constexpr int kSyntheticMaxClasses = 10;
constexpr int kBlobRow[kSyntheticMaxClasses] = {7, 7, 7, 15, 14, 23, 13, 21, 17, 5};
constexpr int kBlobCol[kSyntheticMaxClasses] = {7, 15, 23, 9, 15, 5, 22, 12, 17, 19};

/// Class-separable grayscale blobs with seeded position jitter and noise.
/// A small CNN separates them quickly, which keeps pipeline tests fast.
inline LabeledDataset make_synthetic(int classes, int per_class, int image_side, uint64_t seed,
                                     int64_t id_base = 0) {
    if (classes < 1 || per_class < 1 || image_side < 8)
        throw DataError("make_synthetic: arguments must be positive (side >= 8)");
    if (classes > kSyntheticMaxClasses)
        throw DataError("make_synthetic supports up to 10 classes");

    int n = classes * per_class;
    LabeledDataset ds;
    ds.images = Tensor({n, 1, image_side, image_side});
    ds.labels.resize(static_cast<size_t>(n));
    ds.ids.resize(static_cast<size_t>(n));
    ds.class_count = classes;

    Rng rng(seed);
    double scale = image_side / 28.0;
    double sigma = 2.2 * scale;
    double* base = ds.images.mutable_data();
    int64_t per = static_cast<int64_t>(image_side) * image_side;

    for (int i = 0; i < n; ++i) {
        int c = i / per_class;
        ds.labels[static_cast<size_t>(i)] = c;
        ds.ids[static_cast<size_t>(i)] = id_base + i;
        double cy = kBlobRow[c] * scale + rng.uniform(-2.0, 2.0) * scale;
        double cx = kBlobCol[c] * scale + rng.uniform(-2.0, 2.0) * scale;
        double amp = 0.8 + 0.2 * rng.uniform();
        double* img = base + i * per;
        for (int y = 0; y < image_side; ++y) {
            for (int x = 0; x < image_side; ++x) {
                double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                double v = amp * std::exp(-d2 / (2.0 * sigma * sigma));
                v += rng.uniform() * 0.12;
                img[y * image_side + x] = std::min(1.0, std::max(0.0, v));
            }
        }
    }
    return ds;
}

/// Splits a dataset into train/test with `test_per_class` held out per class.
inline std::pair<LabeledDataset, LabeledDataset> split_train_test(const LabeledDataset& ds,
                                                                  int test_per_class,
                                                                  uint64_t seed) {
    Rng rng(seed);
    std::vector<size_t> train_idx, test_idx;
    for (int c = 0; c < ds.class_count; ++c) {
        auto pool = indices_with_label(ds, c);
        if (static_cast<int>(pool.size()) <= test_per_class)
            throw DataError("not enough samples to hold out test data");
        rng.shuffle(pool);
        for (size_t i = 0; i < pool.size(); ++i)
            (i < static_cast<size_t>(test_per_class) ? test_idx : train_idx).push_back(pool[i]);
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(test_idx.begin(), test_idx.end());
    return {subset(ds, train_idx), subset(ds, test_idx)};
}

}  // namespace lbd
