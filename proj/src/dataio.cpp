#include "ksdd/dataio.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;

namespace ksdd {

long long Mask::positive_count() const {
    long long n = 0;
    for (std::uint8_t p : v) n += p ? 1 : 0;
    return n;
}

AnnotationKind annotation_from_string(const std::string& s) {
    if (s == "original") return AnnotationKind::original;
    if (s == "dilate5") return AnnotationKind::dilate5;
    if (s == "dilate9") return AnnotationKind::dilate9;
    if (s == "dilate13") return AnnotationKind::dilate13;
    if (s == "dilate17") return AnnotationKind::dilate17;
    if (s == "big") return AnnotationKind::big;
    if (s == "coarse") return AnnotationKind::coarse;
    throw std::invalid_argument("unknown annotation kind: " + s);
}

std::string annotation_to_string(AnnotationKind k) {
    switch (k) {
        case AnnotationKind::original: return "original";
        case AnnotationKind::dilate5: return "dilate5";
        case AnnotationKind::dilate9: return "dilate9";
        case AnnotationKind::dilate13: return "dilate13";
        case AnnotationKind::dilate17: return "dilate17";
        case AnnotationKind::big: return "big";
        case AnnotationKind::coarse: return "coarse";
    }
    throw std::invalid_argument("bad annotation kind");
}

Tensor read_image_gray(const std::string& path) {
    cv::Mat m = cv::imread(path, cv::IMREAD_GRAYSCALE);
    if (m.empty()) throw DataError("unreadable image: " + path);
    Tensor t({1, m.rows, m.cols});
    for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x)
            t.at(0, y, x) = static_cast<double>(m.at<std::uint8_t>(y, x)) / 255.0;
    return t;
}

Mask read_mask(const std::string& path) {
    cv::Mat m = cv::imread(path, cv::IMREAD_GRAYSCALE);
    if (m.empty()) throw DataError("unreadable mask: " + path);
    Mask mask(m.rows, m.cols);
    for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x)
            mask.at(y, x) = m.at<std::uint8_t>(y, x) > 0 ? 1 : 0;
    return mask;
}

void write_image_gray(const std::string& path, const Tensor& image) {
    cv::Mat m(image.dim(1), image.dim(2), CV_8UC1);
    for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x) {
            const double v = std::clamp(image.at(0, y, x), 0.0, 1.0);
            m.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
    if (!cv::imwrite(path, m)) throw DataError("cannot write image: " + path);
}

void write_mask(const std::string& path, const Mask& mask) {
    cv::Mat m(mask.h, mask.w, CV_8UC1);
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x)
            m.at<std::uint8_t>(y, x) = mask.at(y, x) ? 255 : 0;
    if (!cv::imwrite(path, m)) throw DataError("cannot write mask: " + path);
}

std::vector<Sample> load_dataset(const std::string& root, const DatasetLayout& layout) {
    if (!fs::is_directory(root)) throw DataError("dataset root is not a directory: " + root);

    auto is_image = [&](const fs::path& p) {
        std::string ext = p.extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
        return std::find(layout.image_exts.begin(), layout.image_exts.end(), ext) !=
               layout.image_exts.end();
    };

    std::vector<Sample> samples;
    std::vector<fs::path> products;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) products.push_back(e.path());
    std::sort(products.begin(), products.end());

    for (const auto& prod : products) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(prod))
            if (e.is_regular_file() && is_image(e.path())) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            const std::string stem = f.stem().string();
            if (stem.size() >= layout.mask_suffix.size() &&
                stem.compare(stem.size() - layout.mask_suffix.size(),
                             layout.mask_suffix.size(), layout.mask_suffix) == 0)
                continue;  // mask file
            fs::path mask_path;
            for (const auto& ext : layout.image_exts) {
                fs::path cand = prod / (stem + layout.mask_suffix + ext);
                if (fs::exists(cand)) { mask_path = cand; break; }
            }
            if (mask_path.empty())
                throw DataError("missing mask for image: " + f.string());

            Sample s;
            s.image = read_image_gray(f.string());
            s.mask = read_mask(mask_path.string());
            if (s.mask.h != s.image.dim(1) || s.mask.w != s.image.dim(2))
                throw DataError("image/mask dimension mismatch: " + f.string());
            s.defective = s.mask.any();
            s.product_id = prod.filename().string();
            s.image_id = s.product_id + "/" + stem;
            samples.push_back(std::move(s));
        }
    }
    if (samples.empty())
        std::cerr << "warning: no samples found under " << root << "\n";
    return samples;
}

Mask dilate_mask(const Mask& mask, int kernel) {
    if (kernel % 2 == 0 || kernel < 1)
        throw std::invalid_argument("dilate_mask: kernel must be odd, got " +
                                    std::to_string(kernel));
    const int r = (kernel - 1) / 2;
    // square structuring element, separable horizontal then vertical max
    Mask tmp(mask.h, mask.w);
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x) {
            std::uint8_t m = 0;
            for (int dx = std::max(0, x - r); dx <= std::min(mask.w - 1, x + r); ++dx)
                m |= mask.at(y, dx);
            tmp.at(y, x) = m;
        }
    Mask out(mask.h, mask.w);
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x) {
            std::uint8_t m = 0;
            for (int dy = std::max(0, y - r); dy <= std::min(mask.h - 1, y + r); ++dy)
                m |= tmp.at(dy, x);
            out.at(y, x) = m;
        }
    return out;
}

Mask make_box_annotation(const Mask& mask, bool rotated) {
    if (!mask.any())
        throw std::invalid_argument("make_box_annotation: empty mask");
    Mask out(mask.h, mask.w);
    if (!rotated) {
        int y0 = mask.h, y1 = -1, x0 = mask.w, x1 = -1;
        for (int y = 0; y < mask.h; ++y)
            for (int x = 0; x < mask.w; ++x)
                if (mask.at(y, x)) {
                    y0 = std::min(y0, y); y1 = std::max(y1, y);
                    x0 = std::min(x0, x); x1 = std::max(x1, x);
                }
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) out.at(y, x) = 1;
        return out;
    }
    std::vector<cv::Point2f> pts;
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x)
            if (mask.at(y, x)) pts.emplace_back(static_cast<float>(x), static_cast<float>(y));
    cv::RotatedRect rect = cv::minAreaRect(pts);
    cv::Point2f corners[4];
    rect.points(corners);
    std::vector<cv::Point> poly(4);
    for (int i = 0; i < 4; ++i)
        poly[static_cast<std::size_t>(i)] =
            cv::Point(static_cast<int>(std::lround(corners[i].x)),
                      static_cast<int>(std::lround(corners[i].y)));
    cv::Mat canvas = cv::Mat::zeros(mask.h, mask.w, CV_8UC1);
    cv::fillConvexPoly(canvas, poly, cv::Scalar(1));
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x)
            out.at(y, x) = (canvas.at<std::uint8_t>(y, x) || mask.at(y, x)) ? 1 : 0;
    return out;
}

Mask apply_annotation(const Mask& mask, AnnotationKind kind) {
    switch (kind) {
        case AnnotationKind::original: return mask;
        case AnnotationKind::dilate5: return dilate_mask(mask, 5);
        case AnnotationKind::dilate9: return dilate_mask(mask, 9);
        case AnnotationKind::dilate13: return dilate_mask(mask, 13);
        case AnnotationKind::dilate17: return dilate_mask(mask, 17);
        case AnnotationKind::big:
            return mask.any() ? make_box_annotation(mask, false) : mask;
        case AnnotationKind::coarse:
            return mask.any() ? make_box_annotation(mask, true) : mask;
    }
    throw std::invalid_argument("bad annotation kind");
}

Sample downscale(const Sample& s, int factor) {
    const int h = s.image.dim(1), w = s.image.dim(2);
    if (h % factor != 0 || w % factor != 0)
        throw std::invalid_argument("downscale: dims " + shape_str(s.image.shape) +
                                    " not divisible by " + std::to_string(factor));
    Sample out = s;
    out.image = Tensor({1, h / factor, w / factor});
    out.mask = Mask(h / factor, w / factor);
    const double inv = 1.0 / (factor * factor);
    for (int y = 0; y < h / factor; ++y)
        for (int x = 0; x < w / factor; ++x) {
            double sum = 0.0;
            std::uint8_t m = 0;
            for (int dy = 0; dy < factor; ++dy)
                for (int dx = 0; dx < factor; ++dx) {
                    sum += s.image.at(0, y * factor + dy, x * factor + dx);
                    m |= s.mask.at(y * factor + dy, x * factor + dx);
                }
            out.image.at(0, y, x) = sum * inv;
            out.mask.at(y, x) = m;
        }
    return out;
}

Sample rotate90(const Sample& s) {
    const int h = s.image.dim(1), w = s.image.dim(2);
    Sample out = s;
    out.image = Tensor({1, w, h});
    out.mask = Mask(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            out.image.at(0, w - 1 - x, y) = s.image.at(0, y, x);
            out.mask.at(w - 1 - x, y) = s.mask.at(y, x);
        }
    return out;
}

Sample rotate90_augment(const Sample& s, double probability, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (u(rng) < probability) return rotate90(s);
    return s;
}

int FoldPlan::fold_of(const std::string& product_id) const {
    auto it = product_fold.find(product_id);
    if (it == product_fold.end())
        throw DataError("product not in fold plan: " + product_id);
    return it->second;
}

FoldPlan make_folds(const std::vector<Sample>& samples, std::uint64_t seed) {
    std::map<std::string, bool> product_defective;
    for (const auto& s : samples) product_defective[s.product_id] |= s.defective;
    if (product_defective.size() < 3)
        throw DataError("make_folds: need at least 3 distinct products, got " +
                        std::to_string(product_defective.size()));

    std::vector<std::string> defective, clean;
    for (const auto& [pid, def] : product_defective)
        (def ? defective : clean).push_back(pid);

    std::mt19937_64 rng(seed);
    std::shuffle(defective.begin(), defective.end(), rng);
    std::shuffle(clean.begin(), clean.end(), rng);

    FoldPlan plan;
    int next = 0;
    for (const auto& pid : defective) plan.product_fold[pid] = next++ % 3;
    for (const auto& pid : clean) plan.product_fold[pid] = next++ % 3;
    return plan;
}

std::vector<Sample> subsample_positives(const std::vector<Sample>& train_set,
                                        int n, std::uint64_t seed) {
    std::vector<std::size_t> pos;
    for (std::size_t i = 0; i < train_set.size(); ++i)
        if (train_set[i].defective) pos.push_back(i);
    if (n > static_cast<int>(pos.size()))
        throw std::invalid_argument("subsample_positives: requested " +
                                    std::to_string(n) + " of " +
                                    std::to_string(pos.size()) + " positives");
    std::mt19937_64 rng(seed);
    std::shuffle(pos.begin(), pos.end(), rng);
    std::vector<bool> keep(train_set.size(), false);
    for (int i = 0; i < n; ++i) keep[pos[static_cast<std::size_t>(i)]] = true;

    std::vector<Sample> out;
    for (std::size_t i = 0; i < train_set.size(); ++i)
        if (!train_set[i].defective || keep[i]) out.push_back(train_set[i]);
    return out;
}

namespace {

// Low-frequency background: bilinearly upsampled coarse value grid plus
// fine Gaussian grain.
Tensor synth_background(int size, std::mt19937_64& rng) {
    const int cell = 32;
    const int gw = size / cell + 2;
    std::vector<double> grid(static_cast<std::size_t>(gw) * gw);
    std::uniform_real_distribution<double> u(0.35, 0.65);
    for (double& v : grid) v = u(rng);

    Tensor img({1, size, size});
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double fy = static_cast<double>(y) / cell;
            const double fx = static_cast<double>(x) / cell;
            const int gy = static_cast<int>(fy), gx = static_cast<int>(fx);
            const double ty = fy - gy, tx = fx - gx;
            auto g = [&](int yy, int xx) {
                return grid[static_cast<std::size_t>(yy) * gw + xx];
            };
            img.at(0, y, x) = (1 - ty) * ((1 - tx) * g(gy, gx) + tx * g(gy, gx + 1)) +
                              ty * ((1 - tx) * g(gy + 1, gx) + tx * g(gy + 1, gx + 1));
        }
    std::normal_distribution<double> grain(0.0, 0.03);
    for (double& v : img.data) v = std::clamp(v + grain(rng), 0.0, 1.0);
    return img;
}

// Thin random polyline "crack", 2-4 px wide, always darker than the
// background as real surface cracks are. The mask marks exactly the
// stamped pixels. Contrast stays well clear of the 0.03 background grain
// so every defect is detectable in principle.
Mask synth_crack(Tensor& img, int size, std::mt19937_64& rng) {
    Mask mask(size, size);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::uniform_int_distribution<int> width_d(2, 4);
    std::uniform_int_distribution<int> nseg_d(5, 9);

    const int width = width_d(rng);
    const int nseg = nseg_d(rng);
    const double delta = -(0.25 + 0.20 * u01(rng));

    double y = size * (0.2 + 0.6 * u01(rng));
    double x = size * (0.2 + 0.6 * u01(rng));
    double angle = 2.0 * M_PI * u01(rng);
    const double seg_len = size / 10.0;

    auto stamp = [&](int cy, int cx) {
        const int r0 = (width - 1) / 2, r1 = width / 2;
        for (int dy = -r0; dy <= r1; ++dy)
            for (int dx = -r0; dx <= r1; ++dx) {
                const int py = cy + dy, px = cx + dx;
                if (py < 0 || py >= size || px < 0 || px >= size) continue;
                if (!mask.at(py, px)) {
                    img.at(0, py, px) = std::clamp(img.at(0, py, px) + delta, 0.0, 1.0);
                    mask.at(py, px) = 1;
                }
            }
    };

    for (int s = 0; s < nseg; ++s) {
        const double ny = y + seg_len * std::sin(angle);
        const double nx = x + seg_len * std::cos(angle);
        const int steps = static_cast<int>(seg_len * 2) + 1;
        for (int t = 0; t <= steps; ++t) {
            const double f = static_cast<double>(t) / steps;
            const int py = static_cast<int>(std::lround(y + f * (ny - y)));
            const int px = static_cast<int>(std::lround(x + f * (nx - x)));
            if (py >= 1 && py < size - 1 && px >= 1 && px < size - 1) stamp(py, px);
        }
        y = ny;
        x = nx;
        angle += (u01(rng) - 0.5) * 1.2;
    }
    return mask;
}

}  // namespace

void synth_generate(int n_pos, int n_neg, int size, std::uint64_t seed,
                    const std::string& out_dir) {
    if (size % 64 != 0)
        throw std::invalid_argument("synth_generate: size must be divisible by 64, got " +
                                    std::to_string(size));
    if (n_pos < 0 || n_neg < 0)
        throw std::invalid_argument("synth_generate: negative counts");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec || !fs::is_directory(out_dir))
        throw DataError("cannot create output directory: " + out_dir);

    std::mt19937_64 rng(seed);
    std::ofstream manifest(fs::path(out_dir) / "manifest.jsonl");
    if (!manifest) throw DataError("cannot write manifest in " + out_dir);

    const int total = n_pos + n_neg;
    for (int i = 0; i < total; ++i) {
        const bool positive = i < n_pos;
        char prod[32];
        std::snprintf(prod, sizeof(prod), "item_%04d", i);
        const fs::path dir = fs::path(out_dir) / prod;
        fs::create_directories(dir, ec);
        if (ec) throw DataError("cannot create directory: " + dir.string());

        Tensor img = synth_background(size, rng);
        Mask mask(size, size);
        if (positive) {
            // Redraw cracks that mostly wandered off the image; a handful
            // of stray pixels is not a usable defect.
            for (int attempt = 0; attempt < 100; ++attempt) {
                Tensor trial = img;
                mask = synth_crack(trial, size, rng);
                if (mask.positive_count() >= size / 2) {
                    img = std::move(trial);
                    break;
                }
            }
            if (mask.positive_count() < size / 2)
                throw std::logic_error("synth_generate: crack generation failed");
        }
        write_image_gray((dir / "surface.png").string(), img);
        write_mask((dir / "surface_label.png").string(), mask);
        manifest << "{\"image\": \"" << prod << "/surface.png\", "
                 << "\"mask\": \"" << prod << "/surface_label.png\", "
                 << "\"label\": " << (positive ? 1 : 0) << ", "
                 << "\"product_id\": \"" << prod << "\"}\n";
    }
}

}  // namespace ksdd
