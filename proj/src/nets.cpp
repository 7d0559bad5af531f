#include "mmc/nets.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mmc/errors.hpp"
#include "mmc/io.hpp"
#include "mmc/ops.hpp"
#include "mmc/rng.hpp"

namespace mmc {

void BackboneSpec::validate() const {
  if (layers.empty()) throw ConfigError("backbone has no layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.in_ch <= 0 || l.out_ch <= 0)
      throw ConfigError("backbone layer " + std::to_string(i) + " has non-positive channels");
    if (l.kernel <= 0 || l.stride <= 0 || l.pad < 0)
      throw ConfigError("backbone layer " + std::to_string(i) + " has bad kernel/stride/pad");
    if (i > 0 && layers[i - 1].out_ch != l.in_ch)
      throw ConfigError("backbone layer " + std::to_string(i) + " input channels " +
                        std::to_string(l.in_ch) + " do not chain from " +
                        std::to_string(layers[i - 1].out_ch));
  }
}

int BackboneSpec::effective_stride(std::size_t i) const {
  if (!stride_mod) return layers[i].stride;
  std::size_t last_down = layers.size();
  for (std::size_t j = 0; j < layers.size(); ++j)
    if (layers[j].stride > 1) last_down = j;
  return (i == last_down) ? 1 : layers[i].stride;
}

int BackboneSpec::out_extent(int in) const {
  int e = in;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    int padded = e + 2 * layers[i].pad;
    if (e <= 0 || padded < layers[i].kernel) return 0;
    e = (padded - layers[i].kernel) / effective_stride(i) + 1;
  }
  return e;
}

int BackboneSpec::min_input() const {
  for (int in = 1; in < 1 << 14; ++in)
    if (out_extent(in) >= 1) return in;
  throw ConfigError("backbone never produces a feature map");
}

std::string BackboneSpec::descriptor() const {
  std::ostringstream os;
  os << "stride_mod=" << (stride_mod ? 1 : 0) << "\n";
  for (const auto& l : layers)
    os << "layer=" << l.in_ch << "," << l.out_ch << "," << l.kernel << "," << l.stride << ","
       << l.pad << "\n";
  return os.str();
}

BackboneSpec BackboneSpec::from_descriptor(const std::string& text) {
  BackboneSpec spec;
  std::istringstream is(text);
  std::string line;
  bool saw_mod = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("bad backbone descriptor line: " + line);
    std::string key = line.substr(0, eq);
    std::string val = line.substr(eq + 1);
    if (key == "stride_mod") {
      spec.stride_mod = (val == "1");
      saw_mod = true;
    } else if (key == "layer") {
      ConvLayerSpec l;
      char comma = 0;
      std::istringstream vs(val);
      vs >> l.in_ch >> comma >> l.out_ch >> comma >> l.kernel >> comma >> l.stride >> comma >>
          l.pad;
      if (!vs) throw ConfigError("bad backbone layer descriptor: " + val);
      spec.layers.push_back(l);
    } else {
      throw ConfigError("unknown backbone descriptor key: " + key);
    }
  }
  if (!saw_mod || spec.layers.empty())
    throw ConfigError("incomplete backbone descriptor");
  spec.validate();
  return spec;
}

BackboneSpec BackboneSpec::desk_default() {
  BackboneSpec spec;
  int chans[] = {3, 16, 32, 64, 64};
  int strides[] = {2, 2, 2, 1};
  for (int i = 0; i < 4; ++i)
    spec.layers.push_back({chans[i], chans[i + 1], 3, strides[i], 1});
  return spec;
}

Model build_model(const BackboneSpec& spec, int num_classes, std::uint64_t seed) {
  spec.validate();
  if (num_classes < 2) throw ConfigError("need at least 2 classes");
  Model m;
  m.spec = spec;
  m.num_classes = num_classes;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    Rng rng = derive_rng(seed, {0x77EE7u, static_cast<std::uint64_t>(i)});
    double std_dev = std::sqrt(2.0 / (l.in_ch * l.kernel * l.kernel));
    Tensor w({l.out_ch, l.in_ch, l.kernel, l.kernel});
    for (double& v : w.values()) v = rng.normal() * std_dev;
    std::string base = "backbone.conv" + std::to_string(i);
    m.params.add(base + ".w", w, true);
    m.params.add(base + ".b", Tensor({l.out_ch}, 0.0), true);
  }
  Rng rng = derive_rng(seed, {0x44EADu});
  int k = spec.feature_channels();
  double std_dev = std::sqrt(1.0 / k);
  Tensor hw({num_classes, k});
  for (double& v : hw.values()) v = rng.normal() * std_dev;
  m.params.add("head.w", hw, true);
  m.params.add("head.b", Tensor({num_classes}, 0.0), true);
  return m;
}

Tensor forward_features(Tape& tape, const Model& model, const Tensor& images) {
  if (images.rank() != 4)
    throw ShapeError("forward_features wants NCHW input, got " + shape_str(images.shape()));
  if (images.dim(1) != model.spec.in_channels())
    throw ShapeError("input has " + std::to_string(images.dim(1)) + " channels, backbone wants " +
                     std::to_string(model.spec.in_channels()));
  int min_in = model.spec.min_input();
  if (images.dim(2) < min_in || images.dim(3) < min_in)
    throw ShapeError("input " + std::to_string(images.dim(2)) + "x" +
                     std::to_string(images.dim(3)) + " below minimum extent " +
                     std::to_string(min_in));
  Tensor x = images;
  for (std::size_t i = 0; i < model.spec.layers.size(); ++i) {
    const auto& l = model.spec.layers[i];
    std::string base = "backbone.conv" + std::to_string(i);
    x = conv2d(tape, x, model.params.at(base + ".w"), model.params.at(base + ".b"),
               model.spec.effective_stride(i), l.pad);
    x = relu(tape, x);
  }
  return x;
}

Tensor classify_features(Tape& tape, const Model& model, const Tensor& pooled) {
  return linear(tape, pooled, model.params.at("head.w"), model.params.at("head.b"));
}

Tensor classify(Tape& tape, const Model& model, const Tensor& images) {
  Tensor feats = forward_features(tape, model, images);
  return classify_features(tape, model, gap(tape, feats));
}

static constexpr char kCkptMagic[4] = {'M', 'M', 'C', '1'};

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(kCkptMagic, 4);
  std::string header = "classes=" + std::to_string(model.num_classes) + "\n" +
                       model.spec.descriptor();
  io::write_string(os, header);
  io::write_u32(os, static_cast<std::uint32_t>(model.params.names().size()));
  for (const auto& name : model.params.names()) {
    io::write_string(os, name);
    io::write_tensor(os, model.params.at(name));
  }
  if (!os) throw IoError("failed writing " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCkptMagic, 4) != 0)
    throw IoError(path.string() + ": not a model checkpoint");
  std::string header = io::read_string(is);
  auto nl = header.find('\n');
  if (nl == std::string::npos || header.rfind("classes=", 0) != 0)
    throw IoError(path.string() + ": malformed checkpoint header");
  int num_classes = std::stoi(header.substr(8, nl - 8));
  BackboneSpec spec = BackboneSpec::from_descriptor(header.substr(nl + 1));

  Model m;
  m.spec = spec;
  m.num_classes = num_classes;
  std::uint32_t count = io::read_u32(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = io::read_string(is);
    m.params.add(name, io::read_tensor(is), true);
  }
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    std::string base = "backbone.conv" + std::to_string(i);
    if (!m.params.contains(base + ".w") || !m.params.contains(base + ".b"))
      throw IoError(path.string() + ": checkpoint missing " + base);
    Shape want{l.out_ch, l.in_ch, l.kernel, l.kernel};
    if (m.params.at(base + ".w").shape() != want)
      throw IoError(path.string() + ": " + base + ".w shape mismatch");
  }
  if (!m.params.contains("head.w") || !m.params.contains("head.b"))
    throw IoError(path.string() + ": checkpoint missing head");
  if (m.params.at("head.w").shape() != Shape{num_classes, spec.feature_channels()})
    throw IoError(path.string() + ": head.w shape mismatch");
  return m;
}

}  // namespace mmc
