#ifndef KSDD_DATAIO_HPP
#define KSDD_DATAIO_HPP

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "ksdd/tensor.hpp"

namespace ksdd {

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Binary defect mask, row major, one byte per pixel (0 or 1).
struct Mask {
    int h = 0, w = 0;
    std::vector<std::uint8_t> v;

    Mask() = default;
    Mask(int height, int width) : h(height), w(width),
        v(static_cast<std::size_t>(height) * width, 0) {}
    std::uint8_t& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
    std::uint8_t at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
    long long positive_count() const;
    bool any() const { return positive_count() > 0; }
};

struct Sample {
    Tensor image;  // 1 x H x W, values in [0, 1]
    Mask mask;
    bool defective = false;
    std::string product_id;
    std::string image_id;
};

enum class AnnotationKind { original, dilate5, dilate9, dilate13, dilate17, big, coarse };

AnnotationKind annotation_from_string(const std::string& s);
std::string annotation_to_string(AnnotationKind k);

struct DatasetLayout {
    std::string mask_suffix = "_label";
    std::vector<std::string> image_exts = {".png", ".bmp", ".jpg", ".jpeg"};
};

// Scans per-product subfolders of `root` for grayscale images and their
// same-stem mask files. Throws DataError (with the offending path) on a
// missing mask, unreadable file or dimension mismatch. An empty directory
// yields an empty list with a warning on stderr.
std::vector<Sample> load_dataset(const std::string& root,
                                 const DatasetLayout& layout = {});

// Binary morphological dilation with a k x k square structuring element.
Mask dilate_mask(const Mask& mask, int kernel);

// Axis-aligned (rotated = false) or minimum-area rotated (rotated = true)
// bounding-box annotation. The result always covers every original
// positive pixel. Throws on an empty mask.
Mask make_box_annotation(const Mask& mask, bool rotated);

// Applies the annotation variant to the sample mask (at original resolution).
Mask apply_annotation(const Mask& mask, AnnotationKind kind);

// Image downscaled by factor x factor mean pooling, mask by max pooling so
// a defective sample never becomes mask-empty.
Sample downscale(const Sample& s, int factor = 2);

// With the given probability rotates image and mask by 90 degrees.
Sample rotate90_augment(const Sample& s, double probability, std::mt19937_64& rng);
Sample rotate90(const Sample& s);

struct FoldPlan {
    int fold_count = 3;
    std::map<std::string, int> product_fold;

    int fold_of(const std::string& product_id) const;
};

// Assigns products to 3 folds, keeping every image of a product in one
// fold and balancing the number of defective products per fold (+-1).
FoldPlan make_folds(const std::vector<Sample>& samples, std::uint64_t seed);

// Keeps exactly `n` defective samples (seeded choice) and all negatives.
std::vector<Sample> subsample_positives(const std::vector<Sample>& train_set,
                                        int n, std::uint64_t seed);

// Writes a synthetic defect corpus (textured backgrounds, thin polyline
// cracks with exact masks) in the loader's directory layout plus a
// line-delimited JSON manifest. `size` must be divisible by 64.
void synth_generate(int n_pos, int n_neg, int size, std::uint64_t seed,
                    const std::string& out_dir);

// 8-bit grayscale image I/O used by the loader, the generator and the CLI.
Tensor read_image_gray(const std::string& path);        // 1 x H x W in [0,1]
Mask read_mask(const std::string& path);
void write_image_gray(const std::string& path, const Tensor& image);
void write_mask(const std::string& path, const Mask& mask);

}  // namespace ksdd

#endif
