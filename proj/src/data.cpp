#include "nerveseg/data.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace nerveseg {

namespace {

constexpr int kFrameSize = 128;
constexpr double kPi = 3.14159265358979323846;

std::atomic<long> g_augment_calls{0};

}  // namespace

// ---- PGM -------------------------------------------------------------------

namespace {

int pgm_token(std::istream& in) {
    // Skips whitespace and '#' comment lines between header tokens.
    int ch = in.get();
    while (ch != EOF) {
        if (ch == '#') {
            while (ch != EOF && ch != '\n') ch = in.get();
        } else if (!std::isspace(ch)) {
            break;
        }
        ch = in.get();
    }
    if (ch == EOF) return -1;
    int value = 0;
    while (ch != EOF && std::isdigit(ch)) {
        value = value * 10 + (ch - '0');
        ch = in.get();
    }
    return value;
}

}  // namespace

GrayImage read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DatasetError("cannot open " + path);
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    if (m0 != 'P' || m1 != '5') throw DatasetError("not a binary PGM (P5): " + path);
    GrayImage img;
    img.w = pgm_token(in);
    img.h = pgm_token(in);
    const int maxval = pgm_token(in);
    if (img.w <= 0 || img.h <= 0 || maxval <= 0 || maxval > 255)
        throw DatasetError("bad PGM header (need 8-bit): " + path);
    img.pixels.resize(static_cast<size_t>(img.w) * img.h);
    in.read(reinterpret_cast<char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
        throw DatasetError("truncated PGM payload: " + path);
    return img;
}

void write_pgm(const std::string& path, const GrayImage& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DatasetError("cannot write " + path);
    out << "P5\n" << img.w << " " << img.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size()));
    if (!out) throw DatasetError("failed writing " + path);
}

// ---- resizing ----------------------------------------------------------------

Tensor resize_bilinear(const Tensor& src, int out_h, int out_w) {
    if (src.n != 1 || src.c != 1) throw std::invalid_argument("resize: expected (1,1,H,W)");
    if (src.h == out_h && src.w == out_w) return src;
    Tensor out(1, 1, out_h, out_w);
    const double sy = static_cast<double>(src.h) / out_h;
    const double sx = static_cast<double>(src.w) / out_w;
    for (int i = 0; i < out_h; ++i) {
        const double fy = (i + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        const double wy = fy - y0;
        const int y1 = std::clamp(y0 + 1, 0, src.h - 1);
        y0 = std::clamp(y0, 0, src.h - 1);
        for (int j = 0; j < out_w; ++j) {
            const double fx = (j + 0.5) * sx - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            const double wx = fx - x0;
            const int x1 = std::clamp(x0 + 1, 0, src.w - 1);
            x0 = std::clamp(x0, 0, src.w - 1);
            const double a = src.at(0, 0, y0, x0), b = src.at(0, 0, y0, x1);
            const double c = src.at(0, 0, y1, x0), d = src.at(0, 0, y1, x1);
            out.at(0, 0, i, j) =
                static_cast<float>((1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * c + wx * d));
        }
    }
    return out;
}

BinaryMask resize_nearest(const BinaryMask& src, int out_h, int out_w) {
    if (src.h == out_h && src.w == out_w) return src;
    BinaryMask out(out_h, out_w);
    const double sy = static_cast<double>(src.h) / out_h;
    const double sx = static_cast<double>(src.w) / out_w;
    for (int i = 0; i < out_h; ++i) {
        const int y = std::clamp(static_cast<int>(std::floor((i + 0.5) * sy)), 0, src.h - 1);
        for (int j = 0; j < out_w; ++j) {
            const int x = std::clamp(static_cast<int>(std::floor((j + 0.5) * sx)), 0, src.w - 1);
            out.at(i, j) = src.at(y, x);
        }
    }
    return out;
}

// ---- dataset loading -------------------------------------------------------------

namespace {

Sample sample_from_images(const GrayImage& img, const GrayImage& msk, const std::string& id) {
    if (img.w != msk.w || img.h != msk.h)
        throw DatasetError("image/mask extent mismatch for " + id);
    Tensor image(1, 1, img.h, img.w);
    for (size_t i = 0; i < img.pixels.size(); ++i)
        image.data[i] = static_cast<float>(img.pixels[i]) / 255.0f;
    BinaryMask mask(msk.h, msk.w);
    for (size_t i = 0; i < msk.pixels.size(); ++i) mask.bits[i] = msk.pixels[i] > 127 ? 1 : 0;
    Sample s;
    s.image = resize_bilinear(image, kFrameSize, kFrameSize);
    for (auto& v : s.image.data) v = std::clamp(v, 0.0f, 1.0f);
    s.mask = resize_nearest(mask, kFrameSize, kFrameSize);
    s.source_id = id;
    return s;
}

}  // namespace

std::vector<SubjectSet> load_dataset(const std::string& root) {
    if (!fs::is_directory(root)) throw DatasetError("dataset root is not a directory: " + root);
    std::vector<std::pair<int, fs::path>> dirs;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (!entry.is_directory()) continue;
        const std::string name = entry.path().filename().string();
        if (name.rfind("subject_", 0) != 0) continue;
        try {
            dirs.emplace_back(std::stoi(name.substr(8)), entry.path());
        } catch (const std::exception&) {
            throw DatasetError("bad subject directory name: " + name);
        }
    }
    if (dirs.empty()) throw DatasetError("no subject_<k> directories under " + root);
    std::sort(dirs.begin(), dirs.end());

    std::vector<SubjectSet> subjects;
    for (const auto& [id, dir] : dirs) {
        SubjectSet set;
        set.subject_id = id;
        const fs::path images = dir / "images";
        const fs::path masks = dir / "masks";
        if (!fs::is_directory(images)) throw DatasetError("missing images/ under " + dir.string());
        std::vector<fs::path> files;
        for (const auto& f : fs::directory_iterator(images))
            if (f.is_regular_file()) files.push_back(f.path());
        std::sort(files.begin(), files.end());
        for (const auto& file : files) {
            const std::string ext = file.extension().string();
            if (ext != ".pgm")
                throw DatasetError("unsupported image format (binary PGM required): " +
                                   file.string());
            const fs::path mask_path = masks / file.filename();
            if (!fs::exists(mask_path))
                throw DatasetError("missing mask for " + file.string());
            set.samples.push_back(sample_from_images(read_pgm(file.string()),
                                                     read_pgm(mask_path.string()),
                                                     file.filename().string()));
        }
        if (set.samples.empty()) throw DatasetError("empty subject directory: " + dir.string());
        subjects.push_back(std::move(set));
    }
    return subjects;
}

void export_subjects(const std::vector<SubjectSet>& subjects, const std::string& root) {
    for (const auto& subject : subjects) {
        const fs::path dir = fs::path(root) / ("subject_" + std::to_string(subject.subject_id));
        fs::create_directories(dir / "images");
        fs::create_directories(dir / "masks");
        int frame = 0;
        for (const auto& s : subject.samples) {
            char name[32];
            std::snprintf(name, sizeof(name), "frame_%04d.pgm", frame++);
            GrayImage img{s.image.w, s.image.h, {}};
            img.pixels.resize(s.image.size());
            for (size_t i = 0; i < s.image.size(); ++i) {
                const float v = std::clamp(s.image.data[i], 0.0f, 1.0f);
                img.pixels[i] = static_cast<uint8_t>(std::floor(255.0f * v + 0.5f));
            }
            write_pgm((dir / "images" / name).string(), img);
            GrayImage msk{s.mask.w, s.mask.h, {}};
            msk.pixels.resize(s.mask.bits.size());
            for (size_t i = 0; i < s.mask.bits.size(); ++i)
                msk.pixels[i] = s.mask.bits[i] ? 255 : 0;
            write_pgm((dir / "masks" / name).string(), msk);
        }
    }
}

// ---- augmentation -----------------------------------------------------------------

Sample warp_sample(const Sample& s, double deg, double dx, double dy) {
    const int h = s.image.h, w = s.image.w;
    const double theta = deg * kPi / 180.0;
    const double ct = std::cos(theta), st = std::sin(theta);
    const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;

    Sample out;
    out.image = Tensor(1, 1, h, w);
    out.mask = BinaryMask(h, w);
    out.source_id = s.source_id;

    // Content rotates by theta about the center then translates by (dx, dy);
    // resampling walks the inverse map.
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const double ux = j - dx - cx;
            const double uy = i - dy - cy;
            const double sx = ct * ux + st * uy + cx;
            const double sy = -st * ux + ct * uy + cy;

            int x0 = static_cast<int>(std::floor(sx));
            int y0 = static_cast<int>(std::floor(sy));
            const double fx = sx - x0, fy = sy - y0;
            double value = 0.0;
            auto px = [&](int y, int x) -> double {
                if (y < 0 || y >= h || x < 0 || x >= w) return 0.0;
                return s.image.at(0, 0, y, x);
            };
            value = (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
                    fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
            out.image.at(0, 0, i, j) = static_cast<float>(std::clamp(value, 0.0, 1.0));

            const int ny = static_cast<int>(std::floor(sy + 0.5));
            const int nx = static_cast<int>(std::floor(sx + 0.5));
            out.mask.at(i, j) =
                (ny >= 0 && ny < h && nx >= 0 && nx < w) ? s.mask.at(ny, nx) : 0;
        }
    return out;
}

Sample augment_sample(const Sample& s, const AugmentConfig& cfg, Rng& rng) {
    cfg.validate();
    g_augment_calls.fetch_add(1, std::memory_order_relaxed);
    if (!cfg.enabled) return s;
    const double deg = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg);
    const double dx = rng.uniform(-cfg.max_shift_frac, cfg.max_shift_frac) * s.image.w;
    const double dy = rng.uniform(-cfg.max_shift_frac, cfg.max_shift_frac) * s.image.h;
    return warp_sample(s, deg, dx, dy);
}

long augment_call_count() { return g_augment_calls.load(std::memory_order_relaxed); }

// ---- split planning -----------------------------------------------------------------

SplitPlan nested_cv_plan(std::vector<int> subject_ids) {
    if (subject_ids.size() < 3)
        throw std::invalid_argument("nested_cv_plan: need at least 3 subjects");
    std::sort(subject_ids.begin(), subject_ids.end());
    if (std::adjacent_find(subject_ids.begin(), subject_ids.end()) != subject_ids.end())
        throw std::invalid_argument("nested_cv_plan: duplicate subject ids");
    SplitPlan plan;
    for (int test : subject_ids)
        for (int val : subject_ids) {
            if (val == test) continue;
            Fold fold;
            fold.test = test;
            fold.val = val;
            for (int id : subject_ids)
                if (id != test && id != val) fold.train.push_back(id);
            plan.folds.push_back(std::move(fold));
        }
    return plan;
}

// ---- phantom generator ----------------------------------------------------------------

namespace {

struct Ellipse {
    double cx, cy, a, b, phi;

    // Quadratic form; <= 1 is inside.
    double q(double x, double y) const {
        const double ux = x - cx, uy = y - cy;
        const double c = std::cos(phi), s = std::sin(phi);
        const double ex = (c * ux + s * uy) / a;
        const double ey = (-s * ux + c * uy) / b;
        return ex * ex + ey * ey;
    }
};

struct PhantomSubject {
    double cx, cy;      // characteristic cluster position
    double radius;      // characteristic cluster scale
    double bg_fx, bg_fy, bg_px, bg_py;
};

Sample render_frame(const PhantomSubject& subj, Rng& rng, int frame_index) {
    const int n = kFrameSize;
    for (int attempt = 0; attempt < 100; ++attempt) {
        const double jcx = subj.cx + rng.uniform(-5.0, 5.0);
        const double jcy = subj.cy + rng.uniform(-5.0, 5.0);
        const double r = subj.radius * rng.uniform(0.9, 1.1);

        std::vector<Ellipse> cluster;
        const int n_ell = rng.next_int(3, 6);
        for (int e = 0; e < n_ell; ++e) {
            Ellipse el;
            el.cx = jcx + rng.uniform(-0.7, 0.7) * r;
            el.cy = jcy + rng.uniform(-0.7, 0.7) * r;
            el.a = rng.uniform(0.55, 1.0) * r;
            el.b = rng.uniform(0.55, 1.0) * r;
            el.phi = rng.uniform(0.0, kPi);
            cluster.push_back(el);
        }

        std::vector<Ellipse> distractors;
        const int n_dis = rng.next_int(1, 2);
        for (int e = 0; e < n_dis; ++e) {
            Ellipse el;
            do {
                el.cx = rng.uniform(0.1, 0.9) * n;
                el.cy = rng.uniform(0.1, 0.9) * n;
            } while (std::hypot(el.cx - jcx, el.cy - jcy) < 2.8 * r);
            el.a = rng.uniform(0.5, 0.9) * r;
            el.b = rng.uniform(0.5, 0.9) * r;
            el.phi = rng.uniform(0.0, kPi);
            distractors.push_back(el);
        }

        // Speckle grain: box-blurred uniform noise, multiplicative.
        std::vector<float> noise(static_cast<size_t>(n) * n);
        for (auto& v : noise) v = static_cast<float>(rng.next_double());

        Sample s;
        s.image = Tensor(1, 1, n, n);
        s.mask = BinaryMask(n, n);
        size_t area = 0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                double base = 0.55 +
                              0.12 * std::sin(2 * kPi * (subj.bg_fx * j / n + subj.bg_px)) *
                                  std::sin(2 * kPi * (subj.bg_fy * i / n + subj.bg_py)) -
                              0.10 * (static_cast<double>(i) / n);

                double dark = 0.0;
                for (const auto& el : cluster) {
                    const double q = el.q(j, i);
                    if (q <= 1.0) s.mask.at(i, j) = 1;
                    dark = std::max(dark, std::clamp((1.15 - q) / 0.3, 0.0, 1.0));
                }
                double dark_dis = 0.0;
                for (const auto& el : distractors)
                    dark_dis = std::max(dark_dis, std::clamp((1.15 - el.q(j, i)) / 0.3, 0.0, 1.0));
                base *= (1.0 - 0.55 * dark) * (1.0 - 0.45 * dark_dis);

                double acc = 0.0;
                int cnt = 0;
                for (int di = -1; di <= 1; ++di)
                    for (int dj = -1; dj <= 1; ++dj) {
                        const int y = i + di, x = j + dj;
                        if (y < 0 || y >= n || x < 0 || x >= n) continue;
                        acc += noise[static_cast<size_t>(y) * n + x];
                        cnt++;
                    }
                const double grain = 1.0 + 0.35 * 2.0 * (acc / cnt - 0.5);
                s.image.at(0, 0, i, j) = static_cast<float>(std::clamp(base * grain, 0.0, 1.0));
                area += s.mask.at(i, j);
            }

        const double frac = static_cast<double>(area) / (static_cast<double>(n) * n);
        if (frac < 0.015 || frac > 0.22) continue;  // stay inside the 1-25% contract
        s.source_id = "frame_" + std::to_string(frame_index);
        return s;
    }
    throw std::logic_error("phantom: could not draw a frame inside the area bounds");
}

}  // namespace

std::vector<SubjectSet> gen_phantom_subjects(int count, int per_subject, Rng& rng) {
    if (count < 1 || per_subject < 1)
        throw std::invalid_argument("gen_phantom_subjects: count and per_subject must be >= 1");
    std::vector<SubjectSet> subjects;
    for (int k = 0; k < count; ++k) {
        PhantomSubject subj;
        subj.cx = rng.uniform(0.3, 0.7) * kFrameSize;
        subj.cy = rng.uniform(0.3, 0.7) * kFrameSize;
        subj.radius = rng.uniform(9.0, 14.0);
        subj.bg_fx = rng.uniform(0.5, 1.5);
        subj.bg_fy = rng.uniform(0.5, 1.5);
        subj.bg_px = rng.next_double();
        subj.bg_py = rng.next_double();
        SubjectSet set;
        set.subject_id = k + 1;
        for (int f = 0; f < per_subject; ++f) set.samples.push_back(render_frame(subj, rng, f));
        subjects.push_back(std::move(set));
    }
    return subjects;
}

}  // namespace nerveseg
