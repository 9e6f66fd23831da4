#include "cted/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>

namespace cted {

Image Image::make(int h, int w, int c) {
    if (h <= 0 || w <= 0 || (c != 1 && c != 3)) throw ShapeError("image must be h x w with 1 or 3 channels");
    Image img;
    img.height = h;
    img.width = w;
    img.channels = c;
    img.values.assign(size_t(h) * size_t(w) * size_t(c), 0.0f);
    return img;
}

size_t PixelMask::count_set() const {
    size_t n = 0;
    for (uint8_t b : bits) n += b;
    return n;
}

PixelMask PixelMask::complement() const {
    PixelMask out = *this;
    for (uint8_t& b : out.bits) b = b ? 0 : 1;
    return out;
}

PixelMask PixelMask::full(int h, int w) {
    PixelMask m;
    m.height = h;
    m.width = w;
    m.bits.assign(size_t(h) * size_t(w), 1);
    return m;
}

Image image_from_tensor(const Tensor& t) {
    if (t.rank() != 2 && t.rank() != 3) throw ShapeError("image tensor must be rank 2 or 3");
    const int c = t.rank() == 3 ? int(t.dim(2)) : 1;
    Image img = Image::make(int(t.dim(0)), int(t.dim(1)), c);
    for (size_t i = 0; i < t.size(); ++i) img.values[i] = std::clamp(t[i], 0.0f, 1.0f);
    return img;
}

Tensor tensor_from_image(const Image& img) {
    Tensor t({size_t(img.height), size_t(img.width), size_t(img.channels)});
    for (size_t i = 0; i < t.size(); ++i) t[i] = img.values[i];
    return t;
}

PixelMask pixel_mask_from_patches(const EditMask& mask, int grid_h, int grid_w, int patch) {
    if (int(mask.size()) != grid_h * grid_w) throw ShapeError("patch mask length != grid size");
    PixelMask out;
    out.height = grid_h * patch;
    out.width = grid_w * patch;
    out.bits.assign(size_t(out.height) * size_t(out.width), 0);
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            const int j = (y / patch) * grid_w + (x / patch);
            out.bits[size_t(y * out.width + x)] = mask.binary[size_t(j)];
        }
    }
    return out;
}

namespace {

constexpr int kWindow = 7;
constexpr double kC1 = 0.01 * 0.01;  // (K1 * L)^2
constexpr double kC2 = 0.03 * 0.03;  // (K2 * L)^2

std::vector<float> to_gray(const Image& img) {
    std::vector<float> g(size_t(img.height) * size_t(img.width));
    if (img.channels == 1) {
        g = img.values;
    } else {
        for (int y = 0; y < img.height; ++y) {
            for (int x = 0; x < img.width; ++x) {
                const double v = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) +
                                 0.114 * img.at(y, x, 2);
                g[size_t(y * img.width + x)] = float(v);
            }
        }
    }
    return g;
}

void check_pair(const Image& a, const Image& b) {
    if (a.height != b.height || a.width != b.width || a.channels != b.channels) {
        throw ShapeError("image pair dims differ");
    }
}

double local_ssim(const std::vector<float>& ga, const std::vector<float>& gb, int width, int cy,
                  int cx) {
    const int r = kWindow / 2;
    double sa = 0.0, sb = 0.0, saa = 0.0, sbb = 0.0, sab = 0.0;
    for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
            const double va = ga[size_t((cy + dy) * width + (cx + dx))];
            const double vb = gb[size_t((cy + dy) * width + (cx + dx))];
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
        }
    }
    const double n = double(kWindow * kWindow);
    const double mua = sa / n, mub = sb / n;
    const double vara = saa / n - mua * mua;
    const double varb = sbb / n - mub * mub;
    const double cov = sab / n - mua * mub;
    return ((2.0 * mua * mub + kC1) * (2.0 * cov + kC2)) /
           ((mua * mua + mub * mub + kC1) * (vara + varb + kC2));
}

float ssim_impl(const Image& a, const Image& b, const PixelMask* mask) {
    check_pair(a, b);
    if (a.height < kWindow || a.width < kWindow) throw ShapeError("image smaller than SSIM window");
    const std::vector<float> ga = to_gray(a);
    const std::vector<float> gb = to_gray(b);
    const int r = kWindow / 2;
    double total = 0.0;
    size_t count = 0;
    for (int pass = mask ? 0 : 1; pass < 2; ++pass) {
        total = 0.0;
        count = 0;
        for (int cy = r; cy < a.height - r; ++cy) {
            for (int cx = r; cx < a.width - r; ++cx) {
                if (pass == 0 && !mask->at(cy, cx)) continue;
                total += local_ssim(ga, gb, a.width, cy, cx);
                ++count;
            }
        }
        if (count > 0) break;  // masked pass hit the interior; otherwise fall back
    }
    return float(total / double(count));
}

}  // namespace

float ssim(const Image& a, const Image& b) { return ssim_impl(a, b, nullptr); }

float ssim_masked(const Image& a, const Image& b, const PixelMask& mask) {
    if (mask.height != a.height || mask.width != a.width) throw ShapeError("mask dims differ");
    return ssim_impl(a, b, &mask);
}

float psnr_masked(const Image& a, const Image& b, const PixelMask& mask) {
    check_pair(a, b);
    if (mask.height != a.height || mask.width != a.width) throw ShapeError("mask dims differ");
    double se = 0.0;
    size_t count = 0;
    for (int y = 0; y < a.height; ++y) {
        for (int x = 0; x < a.width; ++x) {
            if (!mask.at(y, x)) continue;
            for (int c = 0; c < a.channels; ++c) {
                const double d = double(a.at(y, x, c)) - double(b.at(y, x, c));
                se += d * d;
                ++count;
            }
        }
    }
    if (count == 0) throw ShapeError("psnr_masked: empty mask");
    const double mse = se / double(count);
    if (mse < 1e-12) return 100.0f;
    return float(10.0 * std::log10(1.0 / mse));
}

namespace {

// 5x5 Gaussian, sigma 1.4, normalized; borders clamp to edge.
std::vector<float> gaussian_blur(const std::vector<float>& g, int h, int w) {
    double kernel[5][5];
    double sum = 0.0;
    for (int y = -2; y <= 2; ++y) {
        for (int x = -2; x <= 2; ++x) {
            const double v = std::exp(-(x * x + y * y) / (2.0 * 1.4 * 1.4));
            kernel[y + 2][x + 2] = v;
            sum += v;
        }
    }
    for (auto& row : kernel) {
        for (double& v : row) v /= sum;
    }
    std::vector<float> out(g.size());
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int dy = -2; dy <= 2; ++dy) {
                for (int dx = -2; dx <= 2; ++dx) {
                    const int yy = std::clamp(y + dy, 0, h - 1);
                    const int xx = std::clamp(x + dx, 0, w - 1);
                    acc += kernel[dy + 2][dx + 2] * g[size_t(yy * w + xx)];
                }
            }
            out[size_t(y * w + x)] = float(acc);
        }
    }
    return out;
}

}  // namespace

Image canny(const Image& img) {
    const int h = img.height, w = img.width;
    const std::vector<float> blurred = gaussian_blur(to_gray(img), h, w);
    auto px = [&](int y, int x) {
        return double(blurred[size_t(std::clamp(y, 0, h - 1) * w + std::clamp(x, 0, w - 1))]);
    };

    std::vector<double> mag(size_t(h) * size_t(w), 0.0);
    std::vector<int> dir(size_t(h) * size_t(w), 0);  // 0:0deg 1:45deg 2:90deg 3:135deg
    double max_mag = 0.0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double gx = -px(y - 1, x - 1) + px(y - 1, x + 1) - 2.0 * px(y, x - 1) +
                              2.0 * px(y, x + 1) - px(y + 1, x - 1) + px(y + 1, x + 1);
            const double gy = -px(y - 1, x - 1) - 2.0 * px(y - 1, x) - px(y - 1, x + 1) +
                              px(y + 1, x - 1) + 2.0 * px(y + 1, x) + px(y + 1, x + 1);
            const double m = std::sqrt(gx * gx + gy * gy);
            mag[size_t(y * w + x)] = m;
            max_mag = std::max(max_mag, m);
            double angle = std::atan2(gy, gx) * 180.0 / 3.14159265358979323846;
            if (angle < 0.0) angle += 180.0;
            int d = 0;
            if (angle >= 22.5 && angle < 67.5) d = 1;
            else if (angle >= 67.5 && angle < 112.5) d = 2;
            else if (angle >= 112.5 && angle < 157.5) d = 3;
            dir[size_t(y * w + x)] = d;
        }
    }

    Image edges = Image::make(h, w, 1);
    if (max_mag <= 0.0) return edges;

    // NMS; a tie along the gradient keeps exactly one pixel (strict against
    // the negative-side neighbor).
    static const int off[4][2][2] = {
        {{0, -1}, {0, 1}},    // horizontal gradient
        {{1, -1}, {-1, 1}},   // 45 degrees
        {{-1, 0}, {1, 0}},    // vertical gradient
        {{-1, -1}, {1, 1}},   // 135 degrees
    };
    std::vector<double> nms(size_t(h) * size_t(w), 0.0);
    auto mag_at = [&](int y, int x) {
        if (y < 0 || y >= h || x < 0 || x >= w) return 0.0;
        return mag[size_t(y * w + x)];
    };
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int d = dir[size_t(y * w + x)];
            const double m = mag[size_t(y * w + x)];
            const double n1 = mag_at(y + off[d][0][0], x + off[d][0][1]);
            const double n2 = mag_at(y + off[d][1][0], x + off[d][1][1]);
            if (m > n1 && m >= n2) nms[size_t(y * w + x)] = m;
        }
    }

    const double low = 0.1 * max_mag;
    const double high = 0.3 * max_mag;
    std::vector<uint8_t> state(size_t(h) * size_t(w), 0);  // 0 none, 1 weak, 2 strong
    std::deque<std::pair<int, int>> queue;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double m = nms[size_t(y * w + x)];
            if (m >= high) {
                state[size_t(y * w + x)] = 2;
                queue.emplace_back(y, x);
            } else if (m >= low) {
                state[size_t(y * w + x)] = 1;
            }
        }
    }
    while (!queue.empty()) {
        const auto [y, x] = queue.front();
        queue.pop_front();
        edges.at(y, x) = 1.0f;
        for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
                const int yy = y + dy, xx = x + dx;
                if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                if (state[size_t(yy * w + xx)] == 1) {
                    state[size_t(yy * w + xx)] = 2;
                    queue.emplace_back(yy, xx);
                }
            }
        }
    }
    return edges;
}

float canny_ssim(const Image& a, const Image& b) {
    check_pair(a, b);
    return ssim(canny(a), canny(b));
}

Image read_ppm(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path.string());
    std::string magic;
    f >> magic;
    if (magic != "P6") throw IoError("not a binary PPM (P6): " + path.string());
    auto next_int = [&]() {
        int v;
        while (f >> std::ws && f.peek() == '#') {
            std::string comment;
            std::getline(f, comment);
        }
        if (!(f >> v)) throw IoError("bad PPM header: " + path.string());
        return v;
    };
    const int w = next_int();
    const int h = next_int();
    const int maxval = next_int();
    if (maxval != 255) throw IoError("PPM maxval must be 255");
    f.get();  // single whitespace after header
    std::vector<unsigned char> raw(size_t(w) * size_t(h) * 3);
    if (!f.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()))) {
        throw IoError("truncated PPM: " + path.string());
    }
    Image img = Image::make(h, w, 3);
    for (size_t i = 0; i < raw.size(); ++i) img.values[i] = float(raw[i]) / 255.0f;
    return img;
}

void write_ppm(const std::filesystem::path& path, const Image& img) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path.string());
    f << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> raw;
    raw.reserve(size_t(img.width) * size_t(img.height) * 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            for (int c = 0; c < 3; ++c) {
                const float v = img.at(y, x, img.channels == 3 ? c : 0);
                raw.push_back(
                    (unsigned char)(std::clamp(std::lround(double(v) * 255.0), 0L, 255L)));
            }
        }
    }
    f.write(reinterpret_cast<const char*>(raw.data()), std::streamsize(raw.size()));
    if (!f) throw IoError("write failed: " + path.string());
}

std::string metric_report_line(const std::string& name, const Image& edited, const Image& source,
                               const PixelMask& background) {
    const PixelMask& bg =
        background.count_set() == 0 ? PixelMask::full(edited.height, edited.width) : background;
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s\t%.4f\t%.2f\t%.4f", name.c_str(),
                  double(canny_ssim(edited, source)), double(psnr_masked(edited, source, bg)),
                  double(ssim_masked(edited, source, bg)));
    return buf;
}

}  // namespace cted
