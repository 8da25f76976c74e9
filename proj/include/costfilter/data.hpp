#pragma once
// Dataset ingestion for the MVTec-style layout
//   <root>/<category>/train/good/*          normal training images
//   <root>/<category>/test/<defect>/*       test images (defect "good" = normal)
//   <root>/<category>/ground_truth/<defect>/<stem>_mask.*
// plus raw image/mask loading with the documented resize policy.
//
// Binary PPM (P6) and PGM (P5) are supported natively; define
// COSTFILTER_WITH_OPENCV to decode anything OpenCV's imgcodecs handles.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "costfilter/errors.hpp"
#include "costfilter/infer.hpp"
#include "costfilter/tensor.hpp"

#ifdef COSTFILTER_WITH_OPENCV
#include <opencv2/imgcodecs.hpp>
#endif

namespace costfilter {

namespace fs = std::filesystem;

struct TestEntry {
    std::string image_path;
    std::string mask_path;  // empty for normal images or when the mask is missing
    std::string defect;     // subdirectory name; "good" = normal
    bool is_anomalous = false;
};

struct CategoryIndex {
    std::string name;
    std::vector<std::string> train_images;
    std::vector<TestEntry> test_entries;
    std::vector<std::string> missing_masks;  // anomalous test images without a mask
};

struct DatasetIndex {
    std::vector<CategoryIndex> categories;
    std::vector<std::string> warnings;

    const CategoryIndex& category(const std::string& name) const {
        for (auto& c : categories)
            if (c.name == name) return c;
        throw ConfigError("dataset: unknown category " + name);
    }
};

namespace data_detail {

inline std::vector<std::string> sorted_files(const fs::path& dir) {
    std::vector<std::string> out;
    if (!fs::is_directory(dir)) return out;
    for (auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file()) out.push_back(e.path().string());
    std::sort(out.begin(), out.end());
    return out;
}

inline std::vector<std::string> sorted_subdirs(const fs::path& dir) {
    std::vector<std::string> out;
    if (!fs::is_directory(dir)) return out;
    for (auto& e : fs::directory_iterator(dir))
        if (e.is_directory()) out.push_back(e.path().filename().string());
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace data_detail

inline DatasetIndex scan_dataset(const std::string& root) {
    DatasetIndex idx;
    if (!fs::exists(root)) throw IoError("scan_dataset: root does not exist: " + root);
    auto cats = data_detail::sorted_subdirs(root);
    if (cats.empty()) idx.warnings.push_back("dataset root has no category directories");
    for (auto& cat : cats) {
        CategoryIndex ci;
        ci.name = cat;
        fs::path base = fs::path(root) / cat;
        ci.train_images = data_detail::sorted_files(base / "train" / "good");
        if (ci.train_images.empty())
            idx.warnings.push_back("category " + cat + ": no train/good images");

        for (auto& defect : data_detail::sorted_subdirs(base / "test")) {
            for (auto& img : data_detail::sorted_files(base / "test" / defect)) {
                TestEntry e;
                e.image_path = img;
                e.defect = defect;
                e.is_anomalous = defect != "good";
                if (e.is_anomalous) {
                    std::string stem = fs::path(img).stem().string();
                    fs::path gt_dir = base / "ground_truth" / defect;
                    if (fs::is_directory(gt_dir))
                        for (auto& m : fs::directory_iterator(gt_dir)) {
                            std::string mstem = m.path().stem().string();
                            if (mstem == stem || mstem == stem + "_mask") {
                                e.mask_path = m.path().string();
                                break;
                            }
                        }
                    if (e.mask_path.empty()) {
                        ci.missing_masks.push_back(img);
                        idx.warnings.push_back("missing mask for " + img);
                    }
                }
                ci.test_entries.push_back(std::move(e));
            }
        }
        idx.categories.push_back(std::move(ci));
    }
    return idx;
}

// ---- raw pixel I/O ----------------------------------------------------------

namespace data_detail {

// (3,H,W) or (1,H,W) in [0,1] from a binary PPM/PGM; returns false if the
// magic is not P5/P6.
template <class T>
bool read_pnm(const std::string& path, Tensor<T>& out) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open image " + path);
    std::string magic;
    f >> magic;
    if (magic != "P6" && magic != "P5") return false;
    auto next_int = [&]() {
        // skip whitespace and '#' comments
        int c;
        while ((c = f.peek()) != EOF && (std::isspace(c) || c == '#')) {
            if (c == '#')
                f.ignore(1 << 20, '\n');
            else
                f.get();
        }
        long v = -1;
        f >> v;
        if (v < 0) throw IoError("bad header in " + path);
        return static_cast<std::size_t>(v);
    };
    std::size_t W = next_int(), H = next_int(), maxv = next_int();
    if (maxv == 0 || maxv > 255) throw IoError("unsupported maxval in " + path);
    f.get();  // single whitespace before raster
    std::size_t ch = magic == "P6" ? 3 : 1;
    std::vector<unsigned char> buf(ch * H * W);
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("truncated image " + path);
    out = Tensor<T>(Shape{ch, H, W});
    T scale = T(1) / static_cast<T>(maxv);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            for (std::size_t c = 0; c < ch; ++c)
                out(c, y, x) = static_cast<T>(buf[(y * W + x) * ch + c]) * scale;
    return true;
}

template <class T>
Tensor<T> decode_image(const std::string& path) {
    Tensor<T> t;
    if (read_pnm(path, t)) return t;
#ifdef COSTFILTER_WITH_OPENCV
    cv::Mat img = cv::imread(path, cv::IMREAD_UNCHANGED);
    if (img.empty()) throw IoError("cannot decode image " + path);
    if (img.depth() != CV_8U) img.convertTo(img, CV_8U);
    std::size_t H = static_cast<std::size_t>(img.rows), W = static_cast<std::size_t>(img.cols);
    std::size_t ch = static_cast<std::size_t>(img.channels());
    Tensor<T> out(Shape{std::min<std::size_t>(ch, 3), H, W});
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const unsigned char* px = img.ptr<unsigned char>(static_cast<int>(y)) + x * ch;
            if (ch == 1) {
                out(0, y, x) = static_cast<T>(px[0]) / T(255);
            } else {
                // OpenCV is BGR
                out(0, y, x) = static_cast<T>(px[2]) / T(255);
                out(1, y, x) = static_cast<T>(px[1]) / T(255);
                out(2, y, x) = static_cast<T>(px[0]) / T(255);
            }
        }
    return out;
#else
    throw IoError("unsupported image format (build with OpenCV for non-PNM): " + path);
#endif
}

}  // namespace data_detail

// RGB image scaled to [0,1], resized bilinearly to target_size when given.
// Grayscale sources are replicated across the three channels.
template <class T>
Tensor<T> load_image(const std::string& path, std::size_t target_h = 0,
                     std::size_t target_w = 0) {
    Tensor<T> raw = data_detail::decode_image<T>(path);
    std::size_t ch = raw.dim(0), H = raw.dim(1), W = raw.dim(2);
    std::size_t th = target_h ? target_h : H, tw = target_w ? target_w : W;
    Tensor<T> out(Shape{3, th, tw});
    for (std::size_t c = 0; c < 3; ++c) {
        std::size_t src_c = c < ch ? c : 0;
        Tensor<T> plane(Shape{H, W});
        std::copy_n(raw.data() + src_c * H * W, H * W, plane.data());
        if (th != H || tw != W) plane = resize_bilinear_2d(plane, th, tw);
        std::copy_n(plane.data(), th * tw, out.data() + c * th * tw);
    }
    return out;
}

// Binary (H,W) mask: nearest-neighbor resize, then binarize at 0.5.
template <class T>
Tensor<T> load_mask(const std::string& path, std::size_t target_h = 0,
                    std::size_t target_w = 0) {
    Tensor<T> raw = data_detail::decode_image<T>(path);
    std::size_t H = raw.dim(1), W = raw.dim(2);
    std::size_t th = target_h ? target_h : H, tw = target_w ? target_w : W;
    Tensor<T> out(Shape{th, tw});
    for (std::size_t y = 0; y < th; ++y)
        for (std::size_t x = 0; x < tw; ++x) {
            std::size_t sy = std::min(H - 1, y * H / th);
            std::size_t sx = std::min(W - 1, x * W / tw);
            out(y, x) = raw(0, sy, sx) >= T(0.5) ? T(1) : T(0);
        }
    return out;
}

// Writes a (3,H,W) [0,1] image as binary PPM, or an (H,W) map as PGM.
template <class T>
void write_pnm(const Tensor<T>& img, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("write_pnm: cannot open " + path);
    auto clamp8 = [](T v) {
        double d = static_cast<double>(v) * 255.0 + 0.5;
        return static_cast<unsigned char>(std::max(0.0, std::min(255.0, d)));
    };
    if (img.ndim() == 3 && img.dim(0) == 3) {
        std::size_t H = img.dim(1), W = img.dim(2);
        f << "P6\n" << W << " " << H << "\n255\n";
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x)
                for (std::size_t c = 0; c < 3; ++c) {
                    unsigned char b = clamp8(img(c, y, x));
                    f.write(reinterpret_cast<const char*>(&b), 1);
                }
    } else if (img.ndim() == 2) {
        std::size_t H = img.dim(0), W = img.dim(1);
        f << "P5\n" << W << " " << H << "\n255\n";
        for (std::size_t i = 0; i < H * W; ++i) {
            unsigned char b = clamp8(img[i]);
            f.write(reinterpret_cast<const char*>(&b), 1);
        }
    } else {
        throw ShapeError("write_pnm: expect (3,H,W) or (H,W)");
    }
    if (!f) throw IoError("write_pnm: write failed for " + path);
}

}  // namespace costfilter
