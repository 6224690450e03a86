#include <algorithm>
#include <cstdlib>
#include <string>

#include "caap/caap.hpp"
#include "caap/error.hpp"
#include "caap/random.hpp"

namespace caap {

namespace {

int parse_radius(const std::string& text, std::size_t prefix) {
  const std::string digits = text.substr(prefix);
  if (digits.empty() || !std::all_of(digits.begin(), digits.end(), ::isdigit)) {
    throw Error(ErrorKind::kConfig, "bad selection operator '" + text + "'");
  }
  const int r = std::atoi(digits.c_str());
  if (r < 1) throw Error(ErrorKind::kConfig, "selection radius must be >= 1 in '" + text + "'");
  return r;
}

}  // namespace

SelectionOp SelectionOp::parse(const std::string& text) {
  if (text == "nopad") return no_pad();
  if (text.rfind("box", 0) == 0) return box(parse_radius(text, 3));
  if (text.rfind("manhattan", 0) == 0) return manhattan(parse_radius(text, 9));
  throw Error(ErrorKind::kConfig, "unknown selection operator '" + text + "'");
}

std::string SelectionOp::name() const {
  switch (kind) {
    case Kind::kNoPad: return "nopad";
    case Kind::kBox: return "box" + std::to_string(radius);
    case Kind::kManhattan: return "manhattan" + std::to_string(radius);
  }
  return "?";
}

std::vector<int> build_selection(const SelectionOp& op, int center, int grid) {
  if (grid <= 0 || center < 0 || center >= grid * grid) {
    throw Error(ErrorKind::kRange, "selection center " + std::to_string(center) + " outside " +
                                       std::to_string(grid) + "x" + std::to_string(grid) + " grid");
  }
  if (op.kind == SelectionOp::Kind::kNoPad) return {center};
  if (op.radius < 1) throw Error(ErrorKind::kConfig, "selection radius must be >= 1");
  const int cy = center / grid;
  const int cx = center % grid;
  std::vector<int> out;
  for (int y = std::max(0, cy - op.radius); y <= std::min(grid - 1, cy + op.radius); ++y) {
    for (int x = std::max(0, cx - op.radius); x <= std::min(grid - 1, cx + op.radius); ++x) {
      const int dist = op.kind == SelectionOp::Kind::kBox ? std::max(std::abs(y - cy), std::abs(x - cx))
                                                          : std::abs(y - cy) + std::abs(x - cx);
      if (dist <= op.radius) out.push_back(y * grid + x);
    }
  }
  return out;
}

BlankSpec::Kind BlankSpec::parse_kind(const std::string& text) {
  if (text == "black") return Kind::kBlack;
  if (text == "white") return Kind::kWhite;
  if (text == "mean") return Kind::kMean;
  if (text == "noisy") return Kind::kNoisy;
  if (text == "blurnoisy") return Kind::kBlurNoisy;
  throw Error(ErrorKind::kConfig, "unknown blank kind '" + text + "'");
}

std::string BlankSpec::name() const {
  switch (kind) {
    case Kind::kBlack: return "black";
    case Kind::kWhite: return "white";
    case Kind::kMean: return "mean";
    case Kind::kNoisy: return "noisy";
    case Kind::kBlurNoisy: return "blurnoisy";
  }
  return "?";
}

Image make_blank(const BlankSpec& spec, int width, int height, int channels) {
  if (spec.kind == BlankSpec::Kind::kBlurNoisy && (spec.kernel <= 0 || spec.kernel % 2 == 0)) {
    throw Error(ErrorKind::kConfig, "blank blur kernel must be odd, got " + std::to_string(spec.kernel));
  }
  Image img(height, width, channels);
  switch (spec.kind) {
    case BlankSpec::Kind::kBlack:
      break;
    case BlankSpec::Kind::kWhite:
      std::fill(img.data.begin(), img.data.end(), 1.0f);
      break;
    case BlankSpec::Kind::kMean:
      for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
          for (int c = 0; c < channels; ++c) {
            img.at(y, x, c) = std::clamp(spec.mean[static_cast<std::size_t>(std::min(c, 2))], 0.0f, 1.0f);
          }
        }
      }
      break;
    case BlankSpec::Kind::kNoisy:
    case BlankSpec::Kind::kBlurNoisy: {
      Xorshift64Star rng(spec.seed);
      for (auto& v : img.data) {
        v = std::clamp(static_cast<float>(0.5 + spec.sigma * rng.normal()), 0.0f, 1.0f);
      }
      if (spec.kind == BlankSpec::Kind::kBlurNoisy) img = box_blur(img, spec.kernel, 2);
      break;
    }
  }
  return img;
}

LayerRange LayerRange::parse(const std::string& text, int layers) {
  if (text == "auto") return automatic(layers);
  const auto dots = text.find("..");
  auto number = [&](const std::string& s) {
    if (s.empty() || !std::all_of(s.begin(), s.end(), ::isdigit)) {
      throw Error(ErrorKind::kConfig, "bad layer range '" + text + "' (expected auto or a..b)");
    }
    return std::atoi(s.c_str());
  };
  if (dots == std::string::npos) throw Error(ErrorKind::kConfig, "bad layer range '" + text + "'");
  LayerRange r{number(text.substr(0, dots)), number(text.substr(dots + 2))};
  r.validate(layers);
  return r;
}

void LayerRange::validate(int layers) const {
  if (start < 1 || end < start || end > layers) {
    throw Error(ErrorKind::kConfig, "layer range " + std::to_string(start) + ".." + std::to_string(end) +
                                        " invalid for " + std::to_string(layers) + " layers");
  }
}

std::string to_string(AttributionMode mode) {
  switch (mode) {
    case AttributionMode::kNaive: return "naive";
    case AttributionMode::kParallel: return "parallel";
    case AttributionMode::kApprox: return "approx";
    case AttributionMode::kInputInsert: return "input-insert";
    case AttributionMode::kInputDelete: return "input-delete";
  }
  return "?";
}

AttributionMode parse_mode(const std::string& text) {
  for (auto m : {AttributionMode::kNaive, AttributionMode::kParallel, AttributionMode::kApprox,
                 AttributionMode::kInputInsert, AttributionMode::kInputDelete}) {
    if (to_string(m) == text) return m;
  }
  throw Error(ErrorKind::kConfig, "unknown attribution mode '" + text + "'");
}

}  // namespace caap
