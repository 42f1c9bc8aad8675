#include "tfl/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tfl/image_io.hpp"

namespace fs = std::filesystem;

namespace tfl {

namespace {

constexpr int64_t kPoints = 6;
constexpr double kPi = 3.14159265358979323846;

const char* kCsvHeader = "filename,x0,y0,x1,y1,x2,y2,x3,y3,x4,y4,x5,y5";

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

Tensor replicate3(const Tensor& img) {
  if (img.dim(2) == 3) return img;
  int64_t h = img.dim(0), w = img.dim(1);
  Tensor out({h, w, 3});
  auto& ov = out.mutable_data();
  const auto& iv = img.data();
  for (int64_t i = 0; i < h * w; ++i) {
    double v = iv[static_cast<size_t>(i)];
    ov[static_cast<size_t>(3 * i)] = v;
    ov[static_cast<size_t>(3 * i + 1)] = v;
    ov[static_cast<size_t>(3 * i + 2)] = v;
  }
  return out;
}

double clamp_below(double v, double hi) { return std::min(v, std::nextafter(hi, 0.0)); }

} // namespace

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  throw LookupError("unhandled split");
}

Tensor normalized_points(const Sample& s) {
  int64_t n = s.points.dim(1);
  int64_t h = s.image.dim(0), w = s.image.dim(1);
  Tensor out({2, n});
  auto& ov = out.mutable_data();
  const auto& pv = s.points.data();
  for (int64_t i = 0; i < n; ++i) {
    ov[static_cast<size_t>(i)] = pv[static_cast<size_t>(i)] / static_cast<double>(w);
    ov[static_cast<size_t>(n + i)] = pv[static_cast<size_t>(n + i)] / static_cast<double>(h);
  }
  return out;
}

Dataset load_dataset(const std::string& dir) {
  fs::path root(dir);
  std::ifstream csv(root / "annotations.csv");
  if (!csv) throw IoError("cannot open " + (root / "annotations.csv").string());

  std::string line;
  if (!std::getline(csv, line)) throw IoError((root / "annotations.csv").string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kCsvHeader)
    throw IoError("annotations.csv: expected header '" + std::string(kCsvHeader) + "', got '" +
                  line + "'");

  Dataset d;
  int64_t row = 1;
  while (std::getline(csv, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::string where = "annotations.csv row " + std::to_string(row);

    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 1 + 2 * kPoints)
      throw IoError(where + ": expected " + std::to_string(1 + 2 * kPoints) + " fields, got " +
                    std::to_string(fields.size()));

    Sample s;
    s.source_id = fields[0];
    std::vector<double> pts(2 * kPoints);
    for (int64_t i = 0; i < 2 * kPoints; ++i) {
      try {
        size_t pos = 0;
        pts[static_cast<size_t>(i)] = std::stod(fields[static_cast<size_t>(1 + i)], &pos);
        if (pos != fields[static_cast<size_t>(1 + i)].size()) throw std::invalid_argument("");
      } catch (const std::exception&) {
        throw IoError(where + ": bad number '" + fields[static_cast<size_t>(1 + i)] + "'");
      }
    }

    fs::path img_path = root / s.source_id;
    if (!fs::exists(img_path)) throw IoError(where + ": missing image file " + s.source_id);
    s.image = replicate3(read_image(img_path.string()));

    int64_t h = s.image.dim(0), w = s.image.dim(1);
    std::vector<double> pv(static_cast<size_t>(2 * kPoints));
    for (int64_t i = 0; i < kPoints; ++i) {
      double x = pts[static_cast<size_t>(2 * i)];
      double y = pts[static_cast<size_t>(2 * i + 1)];
      if (x < 0.0 || x >= static_cast<double>(w) || y < 0.0 || y >= static_cast<double>(h))
        throw IoError(where + ": point " + std::to_string(i) + " (" + fmt(x) + ", " + fmt(y) +
                      ") outside " + std::to_string(w) + "x" + std::to_string(h));
      pv[static_cast<size_t>(i)] = x;
      pv[static_cast<size_t>(kPoints + i)] = y;
    }
    s.points = Tensor({2, kPoints}, pv);

    if (d.samples.empty()) {
      d.height = h;
      d.width = w;
    } else if (h != d.height || w != d.width) {
      throw IoError(where + ": image is " + std::to_string(w) + "x" + std::to_string(h) +
                    " but the dataset is " + std::to_string(d.width) + "x" +
                    std::to_string(d.height));
    }
    d.samples.push_back(std::move(s));
  }
  return d;
}

void write_dataset(const Dataset& d, const std::string& dir) {
  fs::path root(dir);
  fs::create_directories(root);
  std::ofstream csv(root / "annotations.csv");
  if (!csv) throw IoError("cannot create " + (root / "annotations.csv").string());
  csv << kCsvHeader << "\n";

  for (size_t i = 0; i < d.samples.size(); ++i) {
    const Sample& s = d.samples[i];
    std::string name = s.source_id;
    if (name.empty()) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "img_%05zu.pgm", i);
      name = buf;
    } else {
      name = fs::path(name).stem().string() + ".pgm";
    }
    write_pgm16((root / name).string(), s.image);

    csv << name;
    int64_t n = s.points.dim(1);
    const auto& pv = s.points.data();
    for (int64_t k = 0; k < n; ++k)
      csv << "," << fmt(pv[static_cast<size_t>(k)]) << "," << fmt(pv[static_cast<size_t>(n + k)]);
    csv << "\n";
  }
  if (!csv) throw IoError("failed writing annotations.csv");
}

Sample rotate_sample(const Sample& s, double theta_deg) {
  if (std::fabs(theta_deg) > 180.0)
    throw ContractError("rotate_sample: |theta| must be at most 180, got " + fmt(theta_deg));
  int64_t h = s.image.dim(0), w = s.image.dim(1), c = s.image.dim(2);
  double cx = (static_cast<double>(w) - 1.0) / 2.0;
  double cy = (static_cast<double>(h) - 1.0) / 2.0;
  double th = theta_deg * kPi / 180.0;
  double co = std::cos(th), si = std::sin(th);

  Sample out;
  out.source_id = s.source_id;

  // Points: forward rotation, counterclockwise in the y-down frame.
  int64_t n = s.points.dim(1);
  std::vector<double> pv(static_cast<size_t>(2 * n));
  const auto& sp = s.points.data();
  for (int64_t i = 0; i < n; ++i) {
    double dx = sp[static_cast<size_t>(i)] - cx;
    double dy = sp[static_cast<size_t>(n + i)] - cy;
    pv[static_cast<size_t>(i)] = cx + co * dx - si * dy;
    pv[static_cast<size_t>(n + i)] = cy + si * dx + co * dy;
  }
  out.points = Tensor({2, n}, pv);

  // Image: inverse mapping with bilinear sampling, zero outside the frame.
  Tensor img({h, w, c});
  auto& ov = img.mutable_data();
  const auto& iv = s.image.data();
  auto pixel = [&](int64_t y, int64_t x, int64_t ch) -> double {
    if (y < 0 || y >= h || x < 0 || x >= w) return 0.0;
    return iv[static_cast<size_t>((y * w + x) * c + ch)];
  };
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      double dx = static_cast<double>(x) - cx;
      double dy = static_cast<double>(y) - cy;
      double sx = cx + co * dx + si * dy;
      double sy = cy - si * dx + co * dy;
      double fx = std::floor(sx), fy = std::floor(sy);
      double ax = sx - fx, ay = sy - fy;
      int64_t x0 = static_cast<int64_t>(fx), y0 = static_cast<int64_t>(fy);
      for (int64_t ch = 0; ch < c; ++ch) {
        double v00 = pixel(y0, x0, ch), v01 = pixel(y0, x0 + 1, ch);
        double v10 = pixel(y0 + 1, x0, ch), v11 = pixel(y0 + 1, x0 + 1, ch);
        ov[static_cast<size_t>((y * w + x) * c + ch)] =
            (1.0 - ay) * ((1.0 - ax) * v00 + ax * v01) + ay * ((1.0 - ax) * v10 + ax * v11);
      }
    }
  }
  out.image = img;
  return out;
}

Dataset augment_dataset(const Dataset& d, RngStream& rng) {
  Dataset out;
  out.split = d.split;
  out.height = d.height;
  out.width = d.width;
  out.samples = d.samples;
  out.samples.reserve(d.samples.size() * 3);

  auto clamp_points = [&](Sample& s) {
    auto& pv = s.points.mutable_data();
    int64_t n = s.points.dim(1);
    for (int64_t i = 0; i < n; ++i) {
      pv[static_cast<size_t>(i)] =
          std::max(0.0, clamp_below(pv[static_cast<size_t>(i)], static_cast<double>(out.width)));
      pv[static_cast<size_t>(n + i)] = std::max(
          0.0, clamp_below(pv[static_cast<size_t>(n + i)], static_cast<double>(out.height)));
    }
  };

  for (size_t i = 0; i < d.samples.size(); ++i) {
    const Sample& s = d.samples[i];
    double left = rng.uniform(20.0, 30.0);
    double right = rng.uniform(-30.0, -20.0);
    Sample l = rotate_sample(s, left);
    Sample r = rotate_sample(s, right);
    clamp_points(l);
    clamp_points(r);
    // Rotated copies need their own file identities to survive write_dataset.
    std::string stem = fs::path(s.source_id).stem().string();
    if (stem.empty()) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "img_%05zu", i);
      stem = buf;
    }
    l.source_id = stem + "_l.pgm";
    r.source_id = stem + "_r.pgm";
    out.samples.push_back(std::move(l));
    out.samples.push_back(std::move(r));
  }
  return out;
}

Dataset synth_generate(int64_t count, int64_t height, int64_t width, RngStream& rng) {
  if (height < 24 || width < 32)
    throw ContractError("synth_generate: dims must be at least 24x32, got " +
                        std::to_string(width) + "x" + std::to_string(height));
  if (count < 0) throw ContractError("synth_generate: negative count");

  Dataset d;
  d.height = height;
  d.width = width;

  double hd = static_cast<double>(height), wd = static_cast<double>(width);
  double sigma = std::max(1.0, 0.012 * std::min(hd, wd));
  double arc_sigma = std::max(1.0, 0.01 * std::min(hd, wd));

  for (int64_t si = 0; si < count; ++si) {
    // Fixed draw order per sample keeps generation reproducible.
    double fx = rng.uniform(0.5, 1.5), fy = rng.uniform(0.5, 1.5);
    double px = rng.uniform(), py = rng.uniform();
    double gx = rng.uniform(-1.0, 1.0), gy = rng.uniform(-1.0, 1.0);
    double cx = wd * (0.5 + rng.uniform(-0.15, 0.15));
    double cy = hd * (0.5 + rng.uniform(-0.15, 0.15));
    double rx = 0.30 * wd * rng.uniform(0.85, 1.15);
    double ry = 0.36 * hd * rng.uniform(0.85, 1.15);
    double ra = 0.45 * ry * rng.uniform(0.9, 1.1);

    std::vector<double> lx(static_cast<size_t>(kPoints)), ly(static_cast<size_t>(kPoints));
    for (int64_t k = 0; k < kPoints; ++k) {
      double ang = (15.0 + 30.0 * static_cast<double>(k) + rng.uniform(-3.0, 3.0)) * kPi / 180.0;
      double rho = ra * (1.0 + rng.uniform(-0.03, 0.03));
      double x = cx + rho * std::cos(ang);
      double y = cy + rho * std::sin(ang); // y-down: the arc hangs below center
      lx[static_cast<size_t>(k)] = std::min(wd - 2.0, std::max(1.0, x));
      ly[static_cast<size_t>(k)] = std::min(hd - 2.0, std::max(1.0, y));
    }

    Tensor img({height, width, 1});
    auto& iv = img.mutable_data();
    for (int64_t y = 0; y < height; ++y) {
      for (int64_t x = 0; x < width; ++x) {
        double xn = static_cast<double>(x) / wd, yn = static_cast<double>(y) / hd;
        double v = 0.15 +
                   0.08 * std::sin(2.0 * kPi * (fx * xn + px)) * std::sin(2.0 * kPi * (fy * yn + py)) +
                   0.05 * (gx * xn + gy * yn);

        double ex = (static_cast<double>(x) - cx) / rx;
        double ey = (static_cast<double>(y) - cy) / ry;
        v += 0.22 * std::exp(-2.2 * (ex * ex + ey * ey));

        double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        double r = std::hypot(dx, dy);
        double ang = std::atan2(dy, dx);
        if (ang >= 15.0 * kPi / 180.0 && ang <= 165.0 * kPi / 180.0) {
          double dr = r - ra;
          v += 0.10 * std::exp(-dr * dr / (2.0 * arc_sigma * arc_sigma));
        }
        iv[static_cast<size_t>(y * width + x)] = v;
      }
    }

    // Landmark bumps, truncated at 5 sigma.
    int64_t rad = static_cast<int64_t>(std::ceil(5.0 * sigma));
    for (int64_t k = 0; k < kPoints; ++k) {
      double bx = lx[static_cast<size_t>(k)], by = ly[static_cast<size_t>(k)];
      int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(bx) - rad);
      int64_t x1 = std::min<int64_t>(width - 1, static_cast<int64_t>(bx) + rad);
      int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(by) - rad);
      int64_t y1 = std::min<int64_t>(height - 1, static_cast<int64_t>(by) + rad);
      for (int64_t y = y0; y <= y1; ++y)
        for (int64_t x = x0; x <= x1; ++x) {
          double dx = static_cast<double>(x) - bx, dy = static_cast<double>(y) - by;
          iv[static_cast<size_t>(y * width + x)] +=
              0.42 * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        }
    }

    for (auto& v : iv) v = std::min(1.0, std::max(0.0, v));

    Sample s;
    s.image = replicate3(img);
    std::vector<double> pv(static_cast<size_t>(2 * kPoints));
    for (int64_t k = 0; k < kPoints; ++k) {
      pv[static_cast<size_t>(k)] = lx[static_cast<size_t>(k)];
      pv[static_cast<size_t>(kPoints + k)] = ly[static_cast<size_t>(k)];
    }
    s.points = Tensor({2, kPoints}, pv);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "synth_%05lld.pgm", static_cast<long long>(si));
    s.source_id = buf;
    d.samples.push_back(std::move(s));
  }
  return d;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& d, double val_fraction, RngStream& rng) {
  if (val_fraction < 0.0 || val_fraction > 1.0)
    throw ContractError("split_dataset: val_fraction must be in [0,1], got " + fmt(val_fraction));
  int64_t n = d.size();
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  for (int64_t i = n - 1; i > 0; --i)
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(rng.uniform_int(0, i))]);

  int64_t n_val = static_cast<int64_t>(std::llround(val_fraction * static_cast<double>(n)));
  Dataset train, val;
  train.split = Split::train;
  val.split = Split::val;
  train.height = val.height = d.height;
  train.width = val.width = d.width;
  for (int64_t i = 0; i < n; ++i) {
    const Sample& s = d.samples[static_cast<size_t>(order[static_cast<size_t>(i)])];
    if (i < n - n_val) train.samples.push_back(s);
    else val.samples.push_back(s);
  }
  return {train, val};
}

} // namespace tfl
