#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "tfl/data.hpp"
#include "tfl/image_io.hpp"

using namespace tfl;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("tfl_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Sample make_sample(int64_t h, int64_t w, std::vector<double> pts) {
  Sample s;
  std::vector<double> iv(static_cast<size_t>(h * w * 3));
  for (size_t i = 0; i < iv.size(); ++i) iv[i] = static_cast<double>(i % 97) / 97.0;
  s.image = Tensor({h, w, 3}, std::move(iv));
  s.points = Tensor({2, 6}, std::move(pts));
  s.source_id = "made.pgm";
  return s;
}

// Greedy brightest-blob detector: repeatedly take the global maximum, refine
// it to the intensity centroid of its neighborhood, then suppress a disk.
std::vector<std::pair<double, double>> detect_blobs(const Tensor& img, int count) {
  int64_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  std::vector<double> v(static_cast<size_t>(h * w));
  for (int64_t i = 0; i < h * w; ++i) v[static_cast<size_t>(i)] = img.data()[static_cast<size_t>(i * c)];

  std::vector<std::pair<double, double>> out;
  for (int n = 0; n < count; ++n) {
    int64_t best = 0;
    for (int64_t i = 1; i < h * w; ++i)
      if (v[static_cast<size_t>(i)] > v[static_cast<size_t>(best)]) best = i;
    int64_t by = best / w, bx = best % w;
    double peak = v[static_cast<size_t>(best)];

    double sx = 0.0, sy = 0.0, sw = 0.0;
    for (int64_t y = std::max<int64_t>(0, by - 4); y <= std::min(h - 1, by + 4); ++y)
      for (int64_t x = std::max<int64_t>(0, bx - 4); x <= std::min(w - 1, bx + 4); ++x) {
        double wt = v[static_cast<size_t>(y * w + x)] - 0.75 * peak;
        if (wt <= 0.0) continue;
        sx += wt * static_cast<double>(x);
        sy += wt * static_cast<double>(y);
        sw += wt;
      }
    out.emplace_back(sx / sw, sy / sw);

    for (int64_t y = std::max<int64_t>(0, by - 6); y <= std::min(h - 1, by + 6); ++y)
      for (int64_t x = std::max<int64_t>(0, bx - 6); x <= std::min(w - 1, bx + 6); ++x)
        if ((y - by) * (y - by) + (x - bx) * (x - bx) <= 36) v[static_cast<size_t>(y * w + x)] = 0.0;
  }
  return out;
}

} // namespace

TEST_CASE("pgm16 round trip holds every value to one quantization step") {
  TempDir td("pgm");
  RngStream rng(1);
  Tensor img({5, 7, 1});
  for (auto& v : img.mutable_data()) v = rng.uniform();
  write_pgm16((td.path / "a.pgm").string(), img);
  Tensor back = read_pgm((td.path / "a.pgm").string());
  CHECK(back.shape() == Shape{5, 7, 1});
  for (int64_t i = 0; i < img.numel(); ++i)
    CHECK(std::fabs(back.data()[i] - img.data()[i]) <= 0.5 / 65535.0 + 1e-12);

  // A second write of the loaded values is byte-stable.
  write_pgm16((td.path / "b.pgm").string(), back);
  Tensor again = read_pgm((td.path / "b.pgm").string());
  for (int64_t i = 0; i < img.numel(); ++i) CHECK(again.data()[i] == back.data()[i]);
}

TEST_CASE("png8 write/read round trip and deterministic bytes") {
  TempDir td("png");
  RngStream rng(2);
  Tensor img({6, 4, 3});
  for (auto& v : img.mutable_data()) v = rng.uniform();
  write_png8((td.path / "a.png").string(), img);
  write_png8((td.path / "b.png").string(), img);

  std::ifstream fa(td.path / "a.png", std::ios::binary);
  std::ifstream fb(td.path / "b.png", std::ios::binary);
  std::string ba((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::string bb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  CHECK(ba == bb);
  CHECK(!ba.empty());

  Tensor back = read_png((td.path / "a.png").string());
  CHECK(back.shape() == Shape{6, 4, 3});
  for (int64_t i = 0; i < img.numel(); ++i)
    CHECK(std::fabs(back.data()[i] - img.data()[i]) <= 0.5 / 255.0 + 1e-12);

  CHECK_THROWS_AS(read_png((td.path / "missing.png").string()), IoError);
  CHECK_THROWS_AS(read_image((td.path / "a.bmp").string()), IoError);
}

TEST_CASE("dataset write/load round trip") {
  TempDir td("ds");
  RngStream rng(3);
  Dataset d = synth_generate(4, 24, 32, rng);
  write_dataset(d, td.path.string());
  Dataset back = load_dataset(td.path.string());

  REQUIRE(back.size() == 4);
  CHECK(back.height == 24);
  CHECK(back.width == 32);
  for (int64_t i = 0; i < 4; ++i) {
    const Sample& a = d.samples[static_cast<size_t>(i)];
    const Sample& b = back.samples[static_cast<size_t>(i)];
    CHECK(a.source_id == b.source_id);
    for (int64_t k = 0; k < a.points.numel(); ++k) CHECK(a.points.data()[k] == b.points.data()[k]);
    for (int64_t k = 0; k < a.image.numel(); ++k)
      CHECK(std::fabs(a.image.data()[k] - b.image.data()[k]) <= 0.5 / 65535.0 + 1e-12);
  }

  // Deterministic ordering on reload.
  Dataset back2 = load_dataset(td.path.string());
  for (size_t i = 0; i < back.samples.size(); ++i)
    CHECK(back.samples[i].source_id == back2.samples[i].source_id);
}

TEST_CASE("empty annotations load as an empty dataset") {
  TempDir td("empty");
  std::ofstream csv(td.path / "annotations.csv");
  csv << "filename,x0,y0,x1,y1,x2,y2,x3,y3,x4,y4,x5,y5\n";
  csv.close();
  Dataset d = load_dataset(td.path.string());
  CHECK(d.size() == 0);
}

TEST_CASE("loader errors name the offending row") {
  TempDir td("bad");
  Tensor img({8, 8, 1}, 0.5);
  write_pgm16((td.path / "ok.pgm").string(), img);

  auto write_csv = [&](const std::string& body) {
    std::ofstream csv(td.path / "annotations.csv");
    csv << "filename,x0,y0,x1,y1,x2,y2,x3,y3,x4,y4,x5,y5\n" << body;
  };

  write_csv("gone.pgm,1,1,2,2,3,3,4,4,5,5,6,6\n");
  CHECK_THROWS_WITH_AS(load_dataset(td.path.string()),
                       doctest::Contains("row 2"), IoError);

  write_csv("ok.pgm,1,1,2,2,3,3\n");
  CHECK_THROWS_WITH_AS(load_dataset(td.path.string()),
                       doctest::Contains("row 2"), IoError);

  write_csv("ok.pgm,1,1,2,2,3,3,4,4,5,5,6,notanumber\n");
  CHECK_THROWS_WITH_AS(load_dataset(td.path.string()),
                       doctest::Contains("row 2"), IoError);

  // Out-of-bounds point on the second data row.
  write_csv("ok.pgm,1,1,2,2,3,3,4,4,5,5,6,6\nok.pgm,1,1,2,2,3,3,4,4,5,5,6,9\n");
  CHECK_THROWS_WITH_AS(load_dataset(td.path.string()),
                       doctest::Contains("row 3"), IoError);

  write_csv("ok.pgm,1,1,2,2,3,3,4,4,5,5,6,6\n");
  std::ofstream hdr(td.path / "annotations.csv", std::ios::trunc);
  hdr << "file,x0\nok.pgm,1\n";
  hdr.close();
  CHECK_THROWS_AS(load_dataset(td.path.string()), IoError);
}

TEST_CASE("rotation by zero is the identity") {
  Sample s = make_sample(9, 9, {2, 3, 4, 5, 6, 7, 2, 3, 4, 5, 6, 7});
  Sample r = rotate_sample(s, 0.0);
  for (int64_t i = 0; i < s.points.numel(); ++i)
    CHECK(r.points.data()[i] == doctest::Approx(s.points.data()[i]).epsilon(1e-12));
  for (int64_t i = 0; i < s.image.numel(); ++i)
    CHECK(r.image.data()[i] == doctest::Approx(s.image.data()[i]).epsilon(1e-12));
}

TEST_CASE("quarter turn moves (cx+1, cy) to (cx, cy+1) in the y-down frame") {
  // 9x9: center at (4,4). Point (5,4) -> (4,5).
  Sample s = make_sample(9, 9, {5, 4, 4, 4, 4, 4, 4, 4, 4, 4, 4, 4});
  Sample r = rotate_sample(s, 90.0);
  CHECK(r.points.at({0, 0}) == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(r.points.at({1, 0}) == doctest::Approx(5.0).epsilon(1e-12));

  // Image follows the same convention: in(6,4) shows up at out(4,6).
  Sample bright = make_sample(9, 9, {4, 4, 4, 4, 4, 4, 4, 4, 4, 4, 4, 4});
  bright.image = Tensor({9, 9, 3}, 0.0);
  bright.image.mutable_data()[(4 * 9 + 6) * 3] = 1.0; // (x=6, y=4), channel 0
  Sample rb = rotate_sample(bright, 90.0);
  CHECK(rb.image.at({6, 4, 0}) == doctest::Approx(1.0).epsilon(1e-9));

  CHECK_THROWS_AS(rotate_sample(s, 181.0), ContractError);
}

TEST_CASE("rotation composes to identity and preserves pairwise distances") {
  Sample s = make_sample(33, 41, {10, 14, 18, 22, 26, 30, 8, 11, 14, 17, 20, 23});
  Sample once = rotate_sample(s, 23.5);
  Sample back = rotate_sample(once, -23.5);
  for (int64_t i = 0; i < s.points.numel(); ++i)
    CHECK(std::fabs(back.points.data()[i] - s.points.data()[i]) < 1e-9);

  const auto& a = s.points.data();
  const auto& b = once.points.data();
  for (int64_t i = 0; i < 6; ++i)
    for (int64_t j = i + 1; j < 6; ++j) {
      double da = std::hypot(a[i] - a[j], a[6 + i] - a[6 + j]);
      double db = std::hypot(b[i] - b[j], b[6 + i] - b[6 + j]);
      CHECK(std::fabs(da - db) < 1e-9);
    }
}

TEST_CASE("augmentation triples the dataset and draws angles in band") {
  Dataset d;
  d.height = 33;
  d.width = 33;
  // Points on a small ring around the center so rotations stay in frame.
  for (int i = 0; i < 3; ++i) {
    Sample s = make_sample(33, 33, {21, 16, 11, 16, 16, 21, 16, 21, 16, 11, 21, 16});
    s.source_id = "made_" + std::to_string(i) + ".pgm";
    d.samples.push_back(std::move(s));
  }

  RngStream rng(9);
  Dataset aug = augment_dataset(d, rng);
  REQUIRE(aug.size() == 9);

  // Originals first, untouched.
  for (int i = 0; i < 3; ++i)
    for (int64_t k = 0; k < 12; ++k)
      CHECK(aug.samples[static_cast<size_t>(i)].points.data()[k] ==
            d.samples[static_cast<size_t>(i)].points.data()[k]);

  // Recover each rotation angle from the first landmark, (cx+5, cy).
  for (int i = 0; i < 3; ++i) {
    const Sample& left = aug.samples[static_cast<size_t>(3 + 2 * i)];
    const Sample& right = aug.samples[static_cast<size_t>(3 + 2 * i + 1)];
    double la = std::atan2(left.points.at({1, 0}) - 16.0, left.points.at({0, 0}) - 16.0) * 180.0 /
                3.14159265358979323846;
    double ra = std::atan2(right.points.at({1, 0}) - 16.0, right.points.at({0, 0}) - 16.0) * 180.0 /
                3.14159265358979323846;
    CHECK(la >= 20.0);
    CHECK(la <= 30.0);
    CHECK(ra >= -30.0);
    CHECK(ra <= -20.0);
  }

  // Every augmented sample keeps a distinct file identity.
  std::set<std::string> ids;
  for (const Sample& s : aug.samples) ids.insert(s.source_id);
  CHECK(ids.size() == aug.samples.size());

  // All clamped points lie inside the frame.
  for (const Sample& s : aug.samples)
    for (int64_t k = 0; k < 6; ++k) {
      CHECK(s.points.at({0, k}) >= 0.0);
      CHECK(s.points.at({0, k}) < 33.0);
      CHECK(s.points.at({1, k}) >= 0.0);
      CHECK(s.points.at({1, k}) < 33.0);
    }

  // Reproducible under the same seed.
  RngStream rng2(9);
  Dataset aug2 = augment_dataset(d, rng2);
  for (size_t i = 0; i < aug.samples.size(); ++i)
    for (int64_t k = 0; k < 12; ++k)
      CHECK(aug.samples[i].points.data()[k] == aug2.samples[i].points.data()[k]);
}

TEST_CASE("synthetic generator basics") {
  RngStream rng(4);
  CHECK(synth_generate(0, 24, 32, rng).size() == 0);
  CHECK_THROWS_AS(synth_generate(1, 16, 32, rng), ContractError);

  Dataset d = synth_generate(5, 48, 64, rng);
  CHECK(d.size() == 5);
  CHECK(d.height == 48);
  CHECK(d.width == 64);
  for (const Sample& s : d.samples) {
    CHECK(s.image.shape() == Shape{48, 64, 3});
    for (int64_t k = 0; k < 6; ++k) {
      CHECK(s.points.at({0, k}) >= 0.0);
      CHECK(s.points.at({0, k}) < 64.0);
      CHECK(s.points.at({1, k}) >= 0.0);
      CHECK(s.points.at({1, k}) < 48.0);
    }
    for (int64_t i = 0; i < s.image.numel(); ++i) {
      CHECK(s.image.data()[i] >= 0.0);
      CHECK(s.image.data()[i] <= 1.0);
    }
  }

  RngStream rng_a(11), rng_b(11);
  Dataset a = synth_generate(2, 24, 32, rng_a);
  Dataset b = synth_generate(2, 24, 32, rng_b);
  for (int i = 0; i < 2; ++i) {
    for (int64_t k = 0; k < 12; ++k)
      CHECK(a.samples[static_cast<size_t>(i)].points.data()[k] ==
            b.samples[static_cast<size_t>(i)].points.data()[k]);
    for (int64_t k = 0; k < a.samples[static_cast<size_t>(i)].image.numel(); ++k)
      CHECK(a.samples[static_cast<size_t>(i)].image.data()[k] ==
            b.samples[static_cast<size_t>(i)].image.data()[k]);
  }
}

TEST_CASE("blob detector recovers synthetic landmarks within 2px") {
  RngStream rng(12);
  Dataset d = synth_generate(40, 96, 128, rng);
  int64_t hits = 0, total = 0;
  for (const Sample& s : d.samples) {
    auto found = detect_blobs(s.image, 6);
    for (int64_t k = 0; k < 6; ++k) {
      double gx = s.points.at({0, k}), gy = s.points.at({1, k});
      double best = 1e18;
      for (const auto& [fx, fy] : found) best = std::min(best, std::hypot(fx - gx, fy - gy));
      hits += best <= 2.0;
      ++total;
    }
  }
  INFO("recovered ", hits, " of ", total);
  CHECK(hits >= (total * 95) / 100);
}

TEST_CASE("normalized points scale by width and height") {
  Sample s = make_sample(10, 20, {5, 10, 15, 15, 15, 15, 2, 4, 6, 6, 6, 6});
  Tensor n = normalized_points(s);
  CHECK(n.at({0, 0}) == doctest::Approx(0.25));
  CHECK(n.at({0, 2}) == doctest::Approx(0.75));
  CHECK(n.at({1, 0}) == doctest::Approx(0.2));
  CHECK(n.at({1, 2}) == doctest::Approx(0.6));
}

TEST_CASE("split is a seeded disjoint partition") {
  RngStream rng(5);
  Dataset d = synth_generate(10, 24, 32, rng);
  RngStream sp(6);
  auto [train, val] = split_dataset(d, 0.2, sp);
  CHECK(train.size() == 8);
  CHECK(val.size() == 2);
  CHECK(train.split == Split::train);
  CHECK(val.split == Split::val);

  std::set<std::string> ids;
  for (const auto& s : train.samples) ids.insert(s.source_id);
  for (const auto& s : val.samples) ids.insert(s.source_id);
  CHECK(ids.size() == 10);

  RngStream sp2(6);
  auto [train2, val2] = split_dataset(d, 0.2, sp2);
  for (size_t i = 0; i < train.samples.size(); ++i)
    CHECK(train.samples[i].source_id == train2.samples[i].source_id);
}
