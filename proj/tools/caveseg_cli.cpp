// Command line front end: train / infer / eval / triangulate / info.
//
// Option precedence is explicit flag > config file value > built-in default.
// Exit codes: 0 success, 2 usage or missing input, 1 internal failure.
// Artifacts are written to a temp file and renamed into place, and contain
// no timestamps, so reruns with the same inputs produce identical bytes.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "caveseg/caveline3d.hpp"
#include "caveseg/checkpoint.hpp"
#include "caveseg/dataset.hpp"
#include "caveseg/metrics.hpp"
#include "caveseg/model.hpp"
#include "caveseg/ops.hpp"
#include "caveseg/trainer.hpp"

namespace fs = std::filesystem;
using caveseg::CaveSegModel;
using caveseg::ClassPalette;
using caveseg::ModelConfig;
using caveseg::SegmentationSample;
using caveseg::Tensor;
using nlohmann::json;

namespace {

// Thrown for bad invocations and missing inputs; mapped to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config_path;
  std::string preset = "base";
  std::uint64_t seed = 0;
  std::string out = "out";
  std::string data;  // dataset root
  std::string checkpoint;
  std::string image;
  std::string views;
  std::string split = "val";
  int epochs = 1;
  double learning_rate = 1e-4;
  double momentum = 0.9;
  int synthetic = 0;
  bool oracle = false;
};

// Applies config-file values for flags the user did not pass explicitly.
void merge_config(Options& o, const CLI::App& cmd) {
  if (o.config_path.empty()) return;
  std::ifstream is(o.config_path);
  if (!is) throw UsageError("config file not found: " + o.config_path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw UsageError("config " + o.config_path + ": " + e.what());
  }
  if (!j.is_object()) throw UsageError("config " + o.config_path + ": expected a flat JSON object");

  const auto overridden = [&](const std::string& flag) {
    const CLI::Option* opt = cmd.get_option_no_throw("--" + flag);
    return opt != nullptr && opt->count() > 0;
  };
  for (const auto& [key, value] : j.items()) {
    if (overridden(key)) continue;
    if (key == "preset") o.preset = value.get<std::string>();
    else if (key == "seed") o.seed = value.get<std::uint64_t>();
    else if (key == "out") o.out = value.get<std::string>();
    else if (key == "data") o.data = value.get<std::string>();
    else if (key == "checkpoint") o.checkpoint = value.get<std::string>();
    else if (key == "image") o.image = value.get<std::string>();
    else if (key == "views") o.views = value.get<std::string>();
    else if (key == "split") o.split = value.get<std::string>();
    else if (key == "epochs") o.epochs = value.get<int>();
    else if (key == "learning_rate") o.learning_rate = value.get<double>();
    else if (key == "momentum") o.momentum = value.get<double>();
    else if (key == "synthetic") o.synthetic = value.get<int>();
    else if (key == "oracle") o.oracle = value.get<bool>();
    else std::cerr << "warning: ignoring unknown config key \"" << key << "\"\n";
  }
}

ModelConfig config_for_preset(const std::string& preset) {
  if (preset == "tiny") return ModelConfig::tiny();
  if (preset == "base") return ModelConfig{};
  throw UsageError("unknown preset \"" + preset + "\" (expected tiny or base)");
}

std::string resolve_data_root(const Options& o) {
  std::string root = o.data;
  if (root.empty())
    if (const char* env = std::getenv("CAVESEG_DATA")) root = env;
  if (root.empty())
    throw UsageError("no dataset root: pass --data, set data in the config, "
                     "or export CAVESEG_DATA");
  if (!fs::is_directory(root))
    throw UsageError("dataset root not found: " + root);
  return root;
}

// All-classes synthetic set sized for the model input.
std::vector<SegmentationSample> make_synthetic(const Options& o,
                                               const ModelConfig& cfg,
                                               const ClassPalette& palette,
                                               int count) {
  std::vector<int> classes(static_cast<std::size_t>(palette.num_classes()));
  for (int c = 0; c < palette.num_classes(); ++c)
    classes[static_cast<std::size_t>(c)] = c;
  std::vector<SegmentationSample> samples;
  for (int i = 0; i < count; ++i)
    samples.push_back(caveseg::generate_synthetic(
        o.seed + static_cast<std::uint64_t>(i), cfg.input_h, cfg.input_w,
        classes, palette));
  return samples;
}

void atomic_write_text(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc | std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + tmp);
    os << text;
    if (!os) throw std::runtime_error("write failed: " + tmp);
  }
  fs::rename(tmp, path);
}

void atomic_write_png(const std::string& path, const caveseg::ImageU8& img) {
  const std::string tmp = path + ".tmp";
  caveseg::write_png_rgb(tmp, img);
  fs::rename(tmp, path);
}

int cmd_train(const Options& o) {
  const ModelConfig cfg = config_for_preset(o.preset);
  const ClassPalette palette = ClassPalette::caveseg_default();
  CaveSegModel model(cfg, o.seed);

  std::vector<SegmentationSample> train_set, val_set;
  fs::create_directories(o.out);
  if (o.synthetic > 0) {
    train_set = make_synthetic(o, cfg, palette, o.synthetic);
  } else {
    const std::string root = resolve_data_root(o);
    const auto ids = caveseg::list_sample_ids(root);
    const auto split = caveseg::split_dataset(ids, o.seed);
    for (const auto& id : split.train)
      train_set.push_back(caveseg::load_sample(root, id, palette));
    for (const auto& id : split.val)
      val_set.push_back(caveseg::load_sample(root, id, palette));
    caveseg::save_split_manifest((fs::path(o.out) / "split.txt").string(), split);
  }

  caveseg::TrainOptions topts;
  topts.epochs = o.epochs;
  topts.learning_rate = o.learning_rate;
  topts.momentum = o.momentum;
  topts.seed = o.seed;

  const std::string ckpt = o.checkpoint.empty()
                               ? (fs::path(o.out) / "model.ckpt").string()
                               : o.checkpoint;
  const caveseg::TrainReport report =
      caveseg::train(model, train_set, val_set, topts, &std::cout, ckpt);

  json j;
  j["seed"] = report.seed;
  j["steps"] = report.step_losses.size();
  j["step_losses"] = report.step_losses;
  j["best_epoch"] = report.best_epoch;
  j["checkpoint"] = ckpt;
  json epochs = json::array();
  for (const auto& e : report.epochs) {
    json je;
    je["epoch"] = e.epoch;
    je["mean_loss"] = e.mean_loss;
    if (e.has_val) {
      je["val_miou"] = e.val_miou;
      je["val_macc"] = e.val_macc;
      je["val_aacc"] = e.val_aacc;
    }
    epochs.push_back(std::move(je));
  }
  j["epochs"] = std::move(epochs);
  atomic_write_text((fs::path(o.out) / "train_report.json").string(),
                    j.dump(2) + "\n");
  std::cout << "checkpoint " << ckpt << "\n";
  return 0;
}

int cmd_infer(const Options& o) {
  if (o.checkpoint.empty()) throw UsageError("infer needs --checkpoint");
  if (o.image.empty()) throw UsageError("infer needs --image");
  if (!fs::exists(o.checkpoint))
    throw UsageError("checkpoint not found: " + o.checkpoint);
  if (!fs::exists(o.image)) throw UsageError("image not found: " + o.image);

  CaveSegModel model = caveseg::load_checkpoint(o.checkpoint);
  const ClassPalette palette = ClassPalette::caveseg_default();
  const caveseg::ImageU8 image = caveseg::read_png_rgb(o.image);

  caveseg::NoGradGuard guard;
  const Tensor logits = model.forward(caveseg::image_to_tensor(image));
  const std::vector<std::int32_t> pred = caveseg::argmax_classes(logits);
  const caveseg::ImageU8 mask =
      caveseg::encode_mask(pred, image.h, image.w, palette);

  caveseg::ImageU8 overlay = image;
  for (std::size_t i = 0; i < overlay.pixels.size(); ++i)
    overlay.pixels[i] = static_cast<std::uint8_t>(
        (int{overlay.pixels[i]} + int{mask.pixels[i]}) / 2);

  fs::create_directories(o.out);
  const std::string stem = fs::path(o.image).stem().string();
  const std::string mask_path = (fs::path(o.out) / (stem + "_mask.png")).string();
  const std::string overlay_path =
      (fs::path(o.out) / (stem + "_overlay.png")).string();
  atomic_write_png(mask_path, mask);
  atomic_write_png(overlay_path, overlay);
  std::cout << "mask " << mask_path << "\n" << "overlay " << overlay_path << "\n";
  return 0;
}

int cmd_eval(const Options& o) {
  const ClassPalette palette = ClassPalette::caveseg_default();

  std::vector<SegmentationSample> samples;
  ModelConfig cfg = config_for_preset(o.preset);
  if (o.synthetic > 0) {
    samples = make_synthetic(o, cfg, palette, o.synthetic);
  } else {
    const std::string root = resolve_data_root(o);
    const auto ids = caveseg::list_sample_ids(root);
    const auto split = caveseg::split_dataset(ids, o.seed);
    const auto& subset = o.split == "train"  ? split.train
                         : o.split == "test" ? split.test
                                             : split.val;
    for (const auto& id : subset)
      samples.push_back(caveseg::load_sample(root, id, palette));
  }
  if (samples.empty()) throw UsageError("eval: no samples to score");

  caveseg::ConfusionMatrix cm(palette.num_classes());
  if (o.oracle) {
    // Scores ground truth against itself: a pipeline check that must come
    // out at exactly 1.0 everywhere.
    for (const auto& s : samples) cm.accumulate(s.labels, s.labels);
  } else {
    if (o.checkpoint.empty())
      throw UsageError("eval needs --checkpoint (or --oracle)");
    if (!fs::exists(o.checkpoint))
      throw UsageError("checkpoint not found: " + o.checkpoint);
    CaveSegModel model = caveseg::load_checkpoint(o.checkpoint);
    caveseg::NoGradGuard guard;
    for (const auto& s : samples) {
      const Tensor logits = model.forward(caveseg::image_to_tensor(s.image));
      cm.accumulate(s.labels, caveseg::argmax_classes(logits));
    }
  }

  const auto ious = cm.iou_per_class();
  const auto accs = cm.acc_per_class();
  json per_class = json::array();
  for (const auto& e : palette.entries()) {
    const auto iou = ious[static_cast<std::size_t>(e.id)];
    const auto acc = accs[static_cast<std::size_t>(e.id)];
    std::cout << "class " << e.id << " " << e.name << " iou "
              << (iou ? std::to_string(*iou) : "n/a") << " acc "
              << (acc ? std::to_string(*acc) : "n/a") << "\n";
    json row;
    row["id"] = e.id;
    row["name"] = e.name;
    if (iou) row["iou"] = *iou;
    if (acc) row["acc"] = *acc;
    per_class.push_back(std::move(row));
  }
  const auto sum = cm.summarize();
  std::cout << "mIoU " << sum.miou << " mAcc " << sum.macc << " aAcc "
            << sum.aacc << "\n";

  if (!o.out.empty()) {
    fs::create_directories(o.out);
    json j;
    j["miou"] = sum.miou;
    j["macc"] = sum.macc;
    j["aacc"] = sum.aacc;
    j["per_class"] = std::move(per_class);
    atomic_write_text((fs::path(o.out) / "metrics.json").string(),
                      j.dump(2) + "\n");
  }
  return 0;
}

int cmd_triangulate(const Options& o) {
  if (o.views.empty()) throw UsageError("triangulate needs --views");
  if (!fs::exists(o.views)) throw UsageError("views file not found: " + o.views);
  const std::vector<caveseg::CameraView> views = caveseg::load_views_json(o.views);
  if (views.size() < 2)
    throw UsageError("triangulate needs at least two views, got " +
                     std::to_string(views.size()));

  const caveseg::TriangulationResult result = caveseg::triangulate_views(views);
  fs::create_directories(o.out);
  const std::string ply = (fs::path(o.out) / "caveline.ply").string();
  const std::string summary = (fs::path(o.out) / "caveline_summary.json").string();
  {
    const std::string tmp = ply + ".tmp";
    caveseg::write_segments_ply(tmp, result);
    fs::rename(tmp, ply);
  }
  {
    const std::string tmp = summary + ".tmp";
    caveseg::write_summary_json(tmp, result);
    fs::rename(tmp, summary);
  }
  std::cout << "segments " << result.segments.size() << " rejected "
            << result.rejected << "\n";
  std::cout << "ply " << ply << "\n" << "summary " << summary << "\n";
  return 0;
}

int cmd_info(const Options& o) {
  std::optional<std::uintmax_t> file_bytes;
  ModelConfig cfg;
  if (!o.checkpoint.empty()) {
    if (!fs::exists(o.checkpoint))
      throw UsageError("checkpoint not found: " + o.checkpoint);
    CaveSegModel model = caveseg::load_checkpoint(o.checkpoint);
    cfg = model.config();
    file_bytes = fs::file_size(o.checkpoint);
  } else {
    cfg = config_for_preset(o.preset);
  }

  CaveSegModel model(cfg, o.seed);
  const std::int64_t count = model.count_parameters();
  std::cout << "patch_size " << cfg.patch_size << "\n";
  std::cout << "embed_dim " << cfg.embed_dim << "\n";
  std::cout << "depths";
  for (int d : cfg.depths) std::cout << " " << d;
  std::cout << "\nnum_heads";
  for (int h : cfg.num_heads) std::cout << " " << h;
  std::cout << "\nwindow_size " << cfg.window_size << "\n";
  std::cout << "mlp_ratio " << cfg.mlp_ratio << "\n";
  std::cout << "ppm_scales";
  for (int s : cfg.ppm_scales) std::cout << " " << s;
  std::cout << "\nfusion_channels " << cfg.fusion_channels << "\n";
  std::cout << "num_classes " << cfg.num_classes << "\n";
  std::cout << "input " << cfg.input_h << "x" << cfg.input_w << "\n";
  std::cout << "parameters " << count << "\n";
  std::cout << "parameter_bytes " << 8 * count << "\n";
  if (file_bytes) std::cout << "checkpoint_bytes " << *file_bytes << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CaveSeg: cave segmentation and caveline mapping"};
  app.require_subcommand(1);

  Options o;
  const auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", o.config_path, "flat JSON config file");
    cmd->add_option("--seed", o.seed, "RNG seed");
    cmd->add_option("--out", o.out, "output directory");
    cmd->add_option("--preset", o.preset, "model preset: tiny or base");
    return cmd;
  };

  CLI::App* train = add_common(app.add_subcommand("train", "train a model"));
  train->add_option("--data", o.data, "dataset root (images/ + masks/)");
  train->add_option("--epochs", o.epochs, "training epochs");
  train->add_option("--learning_rate", o.learning_rate, "SGD learning rate");
  train->add_option("--momentum", o.momentum, "SGD momentum");
  train->add_option("--synthetic", o.synthetic,
                    "train on N generated samples instead of a dataset");
  train->add_option("--checkpoint", o.checkpoint, "checkpoint output path");

  CLI::App* infer = add_common(app.add_subcommand("infer", "segment one image"));
  infer->add_option("--checkpoint", o.checkpoint, "checkpoint to load");
  infer->add_option("--image", o.image, "input PNG");

  CLI::App* eval = add_common(app.add_subcommand("eval", "score a dataset split"));
  eval->add_option("--data", o.data, "dataset root");
  eval->add_option("--checkpoint", o.checkpoint, "checkpoint to load");
  eval->add_option("--split", o.split, "train, val, or test");
  eval->add_option("--synthetic", o.synthetic, "score N generated samples");
  eval->add_flag("--oracle", o.oracle, "score ground truth against itself");

  CLI::App* tri = add_common(
      app.add_subcommand("triangulate", "lift caveline segments to 3D"));
  tri->add_option("--views", o.views, "camera views JSON");

  CLI::App* info = add_common(app.add_subcommand("info", "describe a model"));
  info->add_option("--checkpoint", o.checkpoint, "checkpoint to inspect");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      merge_config(o, *train);
      return cmd_train(o);
    }
    if (infer->parsed()) {
      merge_config(o, *infer);
      return cmd_infer(o);
    }
    if (eval->parsed()) {
      merge_config(o, *eval);
      return cmd_eval(o);
    }
    if (tri->parsed()) {
      merge_config(o, *tri);
      return cmd_triangulate(o);
    }
    if (info->parsed()) {
      merge_config(o, *info);
      return cmd_info(o);
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
