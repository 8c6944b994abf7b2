#include "detcore/refdet.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace detcore {

int shape_class(const Box& b) {
  const double ratio = b.width() / b.height();
  return std::abs(ratio - 1.0) < 0.2 ? kSquare : kWide;
}

namespace {

// Integer-corner box of the requested class, placed uniformly in the image.
Box draw_box(int label, int img_size, std::mt19937_64& rng) {
  int w, h;
  if (label == kSquare) {
    std::uniform_int_distribution<int> side(22, 30);
    w = h = side(rng);
  } else {
    std::uniform_int_distribution<int> height(14, 18);
    std::uniform_real_distribution<double> ratio(1.8, 2.2);
    h = height(rng);
    w = std::min(img_size - 2, static_cast<int>(std::lround(h * ratio(rng))));
  }
  std::uniform_int_distribution<int> px(0, img_size - w);
  std::uniform_int_distribution<int> py(0, img_size - h);
  const int x = px(rng), y = py(rng);
  return {double(x), double(y), double(x + w), double(y + h)};
}

bool clear_of(const Box& b, const std::vector<Annotation>& placed, double gap) {
  const Box grown{b.x1 - gap, b.y1 - gap, b.x2 + gap, b.y2 + gap};
  return std::none_of(placed.begin(), placed.end(), [&](const Annotation& a) {
    return intersection_area(grown, a.box) > 0;
  });
}

}  // namespace

std::vector<SynthImage> gen_dataset(int n_images, int img_size, int max_objects,
                                    std::mt19937_64& rng, int first_id) {
  if (n_images < 1 || img_size < 40 || max_objects < 1)
    throw std::invalid_argument("gen_dataset: n_images >= 1, img_size >= 40, max_objects >= 1");
  std::uniform_real_distribution<double> noise(0.0, 0.2);
  std::uniform_real_distribution<double> fill(0.6, 1.0);
  std::uniform_int_distribution<int> count(1, max_objects);
  std::bernoulli_distribution wide(0.5);

  std::vector<SynthImage> out;
  out.reserve(n_images);
  for (int n = 0; n < n_images; ++n) {
    SynthImage img;
    img.id = first_id + n;
    img.pixels.resize(img_size, img_size);
    for (Eigen::Index i = 0; i < img.pixels.size(); ++i) img.pixels(i) = noise(rng);

    const int want = count(rng);
    for (int tries = 0; tries < 100 && static_cast<int>(img.annotations.size()) < want; ++tries) {
      const int label = wide(rng) ? kWide : kSquare;
      const Box b = draw_box(label, img_size, rng);
      if (!clear_of(b, img.annotations, 2.0)) continue;
      img.annotations.push_back({b, shape_class(b)});
    }
    for (const auto& a : img.annotations) {
      const double level = fill(rng);
      const auto x = static_cast<Eigen::Index>(a.box.x1);
      const auto y = static_cast<Eigen::Index>(a.box.y1);
      const auto w = static_cast<Eigen::Index>(a.box.width());
      const auto h = static_cast<Eigen::Index>(a.box.height());
      for (Eigen::Index r = y; r < y + h; ++r)
        for (Eigen::Index c = x; c < x + w; ++c)
          img.pixels(r, c) = std::min(1.0, level + 0.5 * noise(rng));
    }
    out.push_back(std::move(img));
  }
  return out;
}

SynthImage resize_image(const SynthImage& img, double factor, int pad_to) {
  if (!(factor > 0) || pad_to < 1) throw std::invalid_argument("resize_image: bad factor or pad");
  const auto [w, h] = resized_dims(img.width(), img.height(), factor);
  const int pw = (w + pad_to - 1) / pad_to * pad_to;
  const int ph = (h + pad_to - 1) / pad_to * pad_to;
  const double sx = static_cast<double>(w) / img.width();
  const double sy = static_cast<double>(h) / img.height();

  SynthImage out;
  out.id = img.id;
  out.pixels = Eigen::MatrixXd::Zero(ph, pw);
  const Eigen::Index src_h = img.pixels.rows(), src_w = img.pixels.cols();
  for (int r = 0; r < h; ++r) {
    // Pixel centres map back with half-pixel alignment.
    const double fy = std::clamp((r + 0.5) / sy - 0.5, 0.0, double(src_h - 1));
    const auto y0 = static_cast<Eigen::Index>(fy);
    const Eigen::Index y1 = std::min(y0 + 1, src_h - 1);
    const double ty = fy - y0;
    for (int c = 0; c < w; ++c) {
      const double fx = std::clamp((c + 0.5) / sx - 0.5, 0.0, double(src_w - 1));
      const auto x0 = static_cast<Eigen::Index>(fx);
      const Eigen::Index x1 = std::min(x0 + 1, src_w - 1);
      const double tx = fx - x0;
      out.pixels(r, c) = (1 - ty) * ((1 - tx) * img.pixels(y0, x0) + tx * img.pixels(y0, x1)) +
                         ty * ((1 - tx) * img.pixels(y1, x0) + tx * img.pixels(y1, x1));
    }
  }
  for (const auto& a : img.annotations)
    out.annotations.push_back(
        {{a.box.x1 * sx, a.box.y1 * sy, a.box.x2 * sx, a.box.y2 * sy}, a.label});
  return out;
}

void write_dataset(const std::vector<SynthImage>& images, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json index = nlohmann::ordered_json::array();
  for (const auto& img : images) {
    const std::string file = std::to_string(img.id) + ".pgm";
    std::ofstream pgm(dir / file, std::ios::binary);
    if (!pgm) throw std::runtime_error("cannot write " + (dir / file).string());
    pgm << "P5\n" << img.width() << ' ' << img.height() << "\n255\n";
    for (Eigen::Index r = 0; r < img.pixels.rows(); ++r)
      for (Eigen::Index c = 0; c < img.pixels.cols(); ++c)
        pgm.put(static_cast<char>(std::lround(std::clamp(img.pixels(r, c), 0.0, 1.0) * 255)));

    nlohmann::ordered_json boxes = nlohmann::ordered_json::array();
    nlohmann::ordered_json labels = nlohmann::ordered_json::array();
    for (const auto& a : img.annotations) {
      boxes.push_back({a.box.x1, a.box.y1, a.box.x2, a.box.y2});
      labels.push_back(a.label);
    }
    index.push_back({{"image_id", img.id},
                     {"file", file},
                     {"width", img.width()},
                     {"height", img.height()},
                     {"boxes", boxes},
                     {"labels", labels}});
  }
  std::ofstream js(dir / "annotations.json");
  js << index.dump(2) << '\n';
}

std::vector<SynthImage> read_dataset(const std::filesystem::path& dir) {
  std::ifstream js(dir / "annotations.json");
  if (!js) throw std::runtime_error("cannot read " + (dir / "annotations.json").string());
  const auto index = nlohmann::json::parse(js);
  std::vector<SynthImage> out;
  for (const auto& entry : index) {
    SynthImage img;
    img.id = entry.at("image_id").get<int>();
    std::ifstream pgm(dir / entry.at("file").get<std::string>(), std::ios::binary);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    pgm >> magic >> w >> h >> maxval;
    pgm.get();
    if (magic != "P5" || w != entry.at("width").get<int>() || h != entry.at("height").get<int>() ||
        maxval != 255)
      throw std::runtime_error("bad graymap for image " + std::to_string(img.id));
    img.pixels.resize(h, w);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        img.pixels(r, c) = static_cast<unsigned char>(pgm.get()) / 255.0;
    const auto& boxes = entry.at("boxes");
    const auto& labels = entry.at("labels");
    for (std::size_t i = 0; i < boxes.size(); ++i)
      img.annotations.push_back({{boxes[i][0].get<double>(), boxes[i][1].get<double>(),
                                  boxes[i][2].get<double>(), boxes[i][3].get<double>()},
                                 labels[i].get<int>()});
    out.push_back(std::move(img));
  }
  return out;
}

std::vector<GroundTruth> ground_truth(const std::vector<SynthImage>& images) {
  std::vector<GroundTruth> out;
  for (const auto& img : images)
    for (const auto& a : img.annotations) out.push_back({img.id, a.box, a.label});
  return out;
}

}  // namespace detcore
