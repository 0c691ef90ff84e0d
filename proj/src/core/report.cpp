#include "report.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace m2repa {

namespace {

[[noreturn]] void fail(const std::string& msg) {
    throw std::runtime_error("report: " + msg);
}

// Leading eigenvectors of the D x D covariance by deflated power iteration,
// all in double with a fixed deterministic start.
std::vector<std::vector<double>> principal_axes(const std::vector<double>& cov, int d,
                                                int count) {
    std::vector<std::vector<double>> axes;
    std::vector<double> deflated = cov;
    for (int a = 0; a < count; ++a) {
        std::vector<double> v(static_cast<std::size_t>(d));
        for (int i = 0; i < d; ++i) v[static_cast<std::size_t>(i)] = 1.0 + 0.01 * (i + a);
        double eig = 0.0;
        for (int it = 0; it < 200; ++it) {
            std::vector<double> next(static_cast<std::size_t>(d), 0.0);
            for (int i = 0; i < d; ++i) {
                for (int j = 0; j < d; ++j) {
                    next[static_cast<std::size_t>(i)] +=
                        deflated[static_cast<std::size_t>(i * d + j)] * v[static_cast<std::size_t>(j)];
                }
            }
            double norm = 0.0;
            for (double x : next) norm += x * x;
            norm = std::sqrt(norm);
            if (norm < 1e-12) break;
            for (auto& x : next) x /= norm;
            v = std::move(next);
            eig = norm;
        }
        axes.push_back(v);
        for (int i = 0; i < d; ++i) {
            for (int j = 0; j < d; ++j) {
                deflated[static_cast<std::size_t>(i * d + j)] -=
                    eig * v[static_cast<std::size_t>(i)] * v[static_cast<std::size_t>(j)];
            }
        }
    }
    return axes;
}

}  // namespace

std::string csv_num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot open '" + path + "' for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) fail("failed writing '" + path + "'");
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open '" + path + "'");
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_ppm(const std::string& path, const Tensor& rgb) {
    if (rgb.rank() != 3 || rgb.dim(0) != 3) fail("write_ppm expects [3,H,W]");
    const std::int64_t h = rgb.dim(1), w = rgb.dim(2);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot open '" + path + "' for writing");
    out << "P6\n" << w << " " << h << "\n255\n";
    auto v = rgb.values();
    std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                const float val = v[static_cast<std::size_t>((c * h + y) * w + x)];
                const float clamped = std::min(1.0f, std::max(0.0f, val));
                row[static_cast<std::size_t>(x * 3 + c)] =
                    static_cast<unsigned char>(std::lround(clamped * 255.0f));
            }
        }
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size()));
    }
    if (!out) fail("failed writing '" + path + "'");
}

Tensor pca_feature_image(const Tensor& tokens, int grid_h, int grid_w, int scale) {
    if (tokens.rank() != 3) fail("pca_feature_image expects [F,N,D]");
    const std::int64_t f = tokens.dim(0), n = tokens.dim(1), d = tokens.dim(2);
    if (n != static_cast<std::int64_t>(grid_h) * grid_w) {
        fail("token count " + std::to_string(n) + " does not match the " +
             std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
    }
    const std::int64_t rows = f * n;
    auto vals = tokens.values();

    std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
    for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t c = 0; c < d; ++c) {
            mean[static_cast<std::size_t>(c)] += vals[static_cast<std::size_t>(r * d + c)];
        }
    }
    for (auto& m : mean) m /= static_cast<double>(rows);

    std::vector<double> cov(static_cast<std::size_t>(d * d), 0.0);
    for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t i = 0; i < d; ++i) {
            const double vi = vals[static_cast<std::size_t>(r * d + i)] - mean[static_cast<std::size_t>(i)];
            for (std::int64_t j = 0; j < d; ++j) {
                cov[static_cast<std::size_t>(i * d + j)] +=
                    vi * (vals[static_cast<std::size_t>(r * d + j)] - mean[static_cast<std::size_t>(j)]);
            }
        }
    }
    for (auto& c : cov) c /= static_cast<double>(rows);

    auto axes = principal_axes(cov, static_cast<int>(d), 3);

    // project and min-max normalize per channel
    std::vector<double> proj(static_cast<std::size_t>(rows) * 3);
    double lo[3], hi[3];
    for (int c = 0; c < 3; ++c) {
        lo[c] = 1e300;
        hi[c] = -1e300;
    }
    for (std::int64_t r = 0; r < rows; ++r) {
        for (int c = 0; c < 3; ++c) {
            double acc = 0.0;
            for (std::int64_t j = 0; j < d; ++j) {
                acc += (vals[static_cast<std::size_t>(r * d + j)] - mean[static_cast<std::size_t>(j)]) *
                       axes[static_cast<std::size_t>(c)][static_cast<std::size_t>(j)];
            }
            proj[static_cast<std::size_t>(r) * 3 + static_cast<std::size_t>(c)] = acc;
            lo[c] = std::min(lo[c], acc);
            hi[c] = std::max(hi[c], acc);
        }
    }

    const std::int64_t img_h = grid_h * scale;
    const std::int64_t img_w = f * grid_w * scale;
    std::vector<float> img(static_cast<std::size_t>(3 * img_h * img_w), 0.0f);
    for (std::int64_t fi = 0; fi < f; ++fi) {
        for (int gy = 0; gy < grid_h; ++gy) {
            for (int gx = 0; gx < grid_w; ++gx) {
                const std::int64_t r = fi * n + gy * grid_w + gx;
                for (int c = 0; c < 3; ++c) {
                    const double span = hi[c] - lo[c];
                    const double val =
                        span > 1e-12
                            ? (proj[static_cast<std::size_t>(r) * 3 + static_cast<std::size_t>(c)] - lo[c]) / span
                            : 0.5;
                    for (int py = 0; py < scale; ++py) {
                        for (int px = 0; px < scale; ++px) {
                            const std::int64_t y = gy * scale + py;
                            const std::int64_t x = (fi * grid_w + gx) * scale + px;
                            img[static_cast<std::size_t>((c * img_h + y) * img_w + x)] =
                                static_cast<float>(val);
                        }
                    }
                }
            }
        }
    }
    return Tensor::from_data({3, img_h, img_w}, std::move(img));
}

}  // namespace m2repa
