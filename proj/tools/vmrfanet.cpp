// Command-line front end for the VMRFA re-identification stack:
//   synth           generate a synthetic labeled dataset
//   train           optimize a network from a config file
//   embed           compute descriptors for a manifest with a checkpoint
//   eval            CMC / mAP report for query and gallery embeddings
//   augment-preview write before/after augmentation pairs and mask dumps
//   gradcheck       finite-difference sweep over all ops and the full model

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vmrfa/vmrfa.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

std::string sidecar_path(const std::string& tensor_path) {
  std::filesystem::path p(tensor_path);
  p.replace_extension(".csv");
  return p.string();
}

vmrfa::GalleryIndex load_embeddings(const std::string& tensor_path) {
  vmrfa::GalleryIndex index;
  index.embeddings = vmrfa::load_tensor(tensor_path);
  std::ifstream csv(sidecar_path(tensor_path));
  if (!csv) {
    vmrfa::fail<vmrfa::IoError>("cannot open sidecar ", sidecar_path(tensor_path));
  }
  std::string line;
  std::getline(csv, line);  // header
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      vmrfa::fail<vmrfa::DataError>(sidecar_path(tensor_path), ": malformed row '",
                                    line, "'");
    }
    index.person_ids.push_back(std::stoi(line.substr(0, comma)));
    index.camera_ids.push_back(std::stoi(line.substr(comma + 1)));
  }
  return index;
}

struct NetworkBundle {
  vmrfa::NetworkConfig config;
  std::unique_ptr<vmrfa::Network> network;
};

// Rebuilds the architecture recorded in a checkpoint written by `train`.
NetworkBundle network_from_checkpoint(const vmrfa::TrainConfig& cfg,
                                      const std::string& checkpoint) {
  const auto entries = vmrfa::read_checkpoint(checkpoint);
  auto meta = [&](const char* key) {
    auto it = entries.find(key);
    if (it == entries.end()) {
      vmrfa::fail<vmrfa::FormatError>("checkpoint is missing entry '", key, "'");
    }
    return static_cast<int>(it->second[0]);
  };
  NetworkBundle bundle;
  bundle.config = cfg.network_config(meta("meta.num_identities"), meta("meta.num_cameras"));
  bundle.network = std::make_unique<vmrfa::Network>(bundle.config, cfg.seed);
  bundle.network->load_state(entries);
  return bundle;
}

int cmd_synth(int ids, int cams, int imgs, int height, int width, std::uint64_t seed,
              const std::string& out_dir) {
  const std::string manifest =
      vmrfa::synth_generate(ids, cams, imgs, height, width, seed, out_dir);
  std::cout << "wrote " << ids * imgs << " images, manifest " << manifest << "\n";
  return kExitOk;
}

int cmd_train(const vmrfa::TrainConfig& cfg, const std::optional<std::string>& resume) {
  if (cfg.manifest.empty()) {
    vmrfa::fail<vmrfa::ConfigError>("train: data.manifest is required");
  }
  vmrfa::Dataset dataset = vmrfa::load_manifest(cfg.manifest, cfg.num_cameras);
  vmrfa::Trainer trainer(cfg, std::move(dataset));
  if (resume) trainer.load_checkpoint(*resume);
  trainer.run();
  std::cout << "checkpoint " << trainer.checkpoint_path() << "\n"
            << "log " << trainer.log_path() << "\n";
  return kExitOk;
}

int cmd_embed(const vmrfa::TrainConfig& cfg, const std::string& checkpoint,
              const std::string& manifest, const std::string& out_path) {
  NetworkBundle bundle = network_from_checkpoint(cfg, checkpoint);
  const vmrfa::Dataset dataset = vmrfa::load_manifest(manifest);
  const vmrfa::NetworkConfig& net_cfg = bundle.config;

  const int total = static_cast<int>(dataset.records.size());
  vmrfa::Tensor embeddings(
      vmrfa::Shape{total, net_cfg.descriptor_dim()});
  const int batch_size = 32;
  const std::int64_t image_size = 3ll * net_cfg.input_height * net_cfg.input_width;
  for (int begin = 0; begin < total; begin += batch_size) {
    const int count = std::min(batch_size, total - begin);
    vmrfa::Tensor images(
        vmrfa::Shape{count, 3, net_cfg.input_height, net_cfg.input_width});
    for (int i = 0; i < count; ++i) {
      const vmrfa::LabeledImage sample =
          dataset.load(static_cast<std::size_t>(begin + i));
      vmrfa::Rng rng(0);  // eval chain draws nothing
      vmrfa::Tensor pixels =
          vmrfa::augment_chain(sample, cfg.hda, net_cfg.input_height,
                               net_cfg.input_width, /*train_mode=*/false, rng);
      std::copy(pixels.data(), pixels.data() + image_size,
                images.data() + static_cast<std::int64_t>(i) * image_size);
    }
    const vmrfa::Tensor batch = bundle.network->embed(images);
    std::copy(batch.data(), batch.data() + batch.numel(),
              embeddings.data() +
                  static_cast<std::int64_t>(begin) * net_cfg.descriptor_dim());
  }

  vmrfa::save_tensor(out_path, embeddings);
  std::ofstream csv(sidecar_path(out_path));
  if (!csv) vmrfa::fail<vmrfa::IoError>("cannot open ", sidecar_path(out_path));
  csv << "person_id,camera_id\n";
  for (const vmrfa::ImageRecord& rec : dataset.records) {
    csv << rec.original_person_id << "," << rec.camera_id << "\n";
  }
  std::cout << "wrote " << total << " embeddings to " << out_path << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& query_path, const std::string& gallery_path,
             int max_rank, const std::optional<std::string>& cmc_out) {
  const vmrfa::GalleryIndex queries = load_embeddings(query_path);
  const vmrfa::GalleryIndex gallery = load_embeddings(gallery_path);
  const vmrfa::EvalReport report = vmrfa::evaluate(queries, gallery, max_rank);
  auto cmc_at = [&](int k) {
    const int i = std::min<int>(k, static_cast<int>(report.cmc.size())) - 1;
    return 100.0 * report.cmc[static_cast<std::size_t>(i)];
  };
  std::printf("rank-1: %.1f\n", cmc_at(1));
  std::printf("rank-5: %.1f\n", cmc_at(5));
  std::printf("rank-10: %.1f\n", cmc_at(10));
  std::printf("mAP: %.1f\n", 100.0 * report.map);
  std::printf("valid queries: %d\n", report.num_valid_queries);
  if (cmc_out) {
    std::ofstream csv(*cmc_out);
    if (!csv) vmrfa::fail<vmrfa::IoError>("cannot open ", *cmc_out);
    csv << "rank,cmc\n";
    for (std::size_t k = 0; k < report.cmc.size(); ++k) {
      csv << (k + 1) << "," << report.cmc[k] << "\n";
    }
  }
  return kExitOk;
}

void dump_mask(const vmrfa::Tensor& masks, int image_index, const std::string& base) {
  const int channels = masks.dim(1), height = masks.dim(2), width = masks.dim(3);
  vmrfa::Tensor one(vmrfa::Shape{channels, height, width});
  const std::int64_t block = one.numel();
  std::copy(masks.data() + image_index * block, masks.data() + (image_index + 1) * block,
            one.data());
  vmrfa::save_tensor(base + ".vtns", one);
  // channel mean, min-max scaled per image by the PGM writer
  vmrfa::Tensor mean(vmrfa::Shape{height, width});
  const std::int64_t plane = static_cast<std::int64_t>(height) * width;
  for (std::int64_t i = 0; i < plane; ++i) {
    double s = 0.0;
    for (int c = 0; c < channels; ++c) s += one[c * plane + i];
    mean[i] = static_cast<float>(s / channels);
  }
  vmrfa::write_pgm(base + ".pgm", mean);
}

int cmd_augment_preview(const vmrfa::TrainConfig& cfg, const std::string& manifest,
                        int count, const std::string& out_dir, bool dump_masks,
                        const std::optional<std::string>& checkpoint) {
  vmrfa::Dataset dataset = vmrfa::load_manifest(manifest);
  std::filesystem::create_directories(out_dir);
  count = std::min<int>(count, static_cast<int>(dataset.records.size()));

  const vmrfa::NetworkConfig probe_cfg =
      cfg.network_config(dataset.num_identities, dataset.num_cameras);
  const std::filesystem::path out(out_dir);
  std::vector<vmrfa::Tensor> augmented;
  for (int i = 0; i < count; ++i) {
    const vmrfa::LabeledImage sample = dataset.load(static_cast<std::size_t>(i));
    vmrfa::write_ppm((out / vmrfa::detail::concat("sample", i, "_before.ppm")).string(),
                     sample.pixels);
    vmrfa::Rng rng = vmrfa::Rng::stream(cfg.seed, 0xa09ULL, 0ULL,
                                        static_cast<std::uint64_t>(i));
    vmrfa::Tensor pixels =
        vmrfa::augment_chain(sample, cfg.hda, probe_cfg.input_height,
                             probe_cfg.input_width, /*train_mode=*/true, rng);
    augmented.push_back(pixels);
    vmrfa::Tensor viewable = pixels;  // undo standardization for inspection
    for (std::int64_t j = 0; j < viewable.numel(); ++j) {
      viewable[j] = viewable[j] * vmrfa::kPixelStd + vmrfa::kPixelMean;
    }
    vmrfa::write_ppm((out / vmrfa::detail::concat("sample", i, "_after.ppm")).string(),
                     viewable);
  }

  if (dump_masks) {
    NetworkBundle bundle;
    if (checkpoint) {
      bundle = network_from_checkpoint(cfg, *checkpoint);
    } else {
      bundle.config = probe_cfg;
      bundle.network = std::make_unique<vmrfa::Network>(bundle.config, cfg.seed);
    }
    if (!bundle.config.attention_enabled) {
      vmrfa::fail<vmrfa::ConfigError>("augment-preview: mask dump needs net.attention=true");
    }
    vmrfa::Tensor images(vmrfa::Shape{count, 3, bundle.config.input_height,
                                      bundle.config.input_width});
    const std::int64_t image_size =
        3ll * bundle.config.input_height * bundle.config.input_width;
    for (int i = 0; i < count; ++i) {
      std::copy(augmented[static_cast<std::size_t>(i)].data(),
                augmented[static_cast<std::size_t>(i)].data() + image_size,
                images.data() + i * image_size);
    }
    vmrfa::Graph g(/*grad_enabled=*/false);
    const vmrfa::ForwardOutputs fwd =
        bundle.network->forward(g, images, vmrfa::BnMode::eval);
    for (int i = 0; i < count; ++i) {
      dump_mask(fwd.mask1->value(), i,
                (out / vmrfa::detail::concat("sample", i, "_mask1")).string());
      dump_mask(fwd.mask2->value(), i,
                (out / vmrfa::detail::concat("sample", i, "_mask2")).string());
    }
  }
  std::cout << "wrote " << count << " preview pairs to " << out_dir << "\n";
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, int instances, int warmup) {
  bool ok = true;
  const auto reports = vmrfa::gradcheck_all_ops(seed, instances);
  for (const vmrfa::OpGradReport& rep : reports) {
    const bool pass = rep.max_rel < 1e-3;
    ok = ok && pass;
    std::printf("%-22s max rel error %.3e over %d instances (%d coords)  %s\n",
                rep.op.c_str(), rep.max_rel, rep.instances, rep.coords,
                pass ? "ok" : "FAIL");
  }
  const vmrfa::FdReport e2e = vmrfa::gradcheck_network_end_to_end(seed, warmup);
  const bool e2e_pass = e2e.max_rel < 1e-2;
  ok = ok && e2e_pass;
  std::printf("%-22s max rel error %.3e over %d checks  %s\n", "network end-to-end",
              e2e.max_rel, e2e.coords_checked, e2e_pass ? "ok" : "FAIL");
  return ok ? kExitOk : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"VMRFA person re-identification: training, embedding and evaluation"};
  app.require_subcommand(1);

  std::optional<std::string> config_path;
  std::vector<std::string> overrides;
  std::uint64_t seed_flag = 0;
  bool seed_set = false;
  auto add_config_flags = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "config file of key = value lines");
    cmd->add_option("--set", overrides, "override a config key, e.g. --set loss.lambda1=5")
        ->take_all();
    cmd->add_option_function<std::uint64_t>(
        "--seed", [&](std::uint64_t v) { seed_flag = v; seed_set = true; },
        "override the config seed");
  };
  auto make_config = [&]() {
    vmrfa::TrainConfig cfg = vmrfa::load_config(config_path, overrides);
    if (seed_set) cfg.seed = seed_flag;
    return cfg;
  };

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  int synth_ids = 20, synth_cams = 4, synth_imgs = 25;
  int synth_height = 128, synth_width = 48;
  std::uint64_t synth_seed = 0;
  std::string synth_out = "synth_data";
  synth->add_option("--ids", synth_ids, "number of identities");
  synth->add_option("--cams", synth_cams, "number of cameras");
  synth->add_option("--imgs-per-id", synth_imgs, "images per identity");
  synth->add_option("--height", synth_height, "image height");
  synth->add_option("--width", synth_width, "image width");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--out", synth_out, "output directory");

  auto* train = app.add_subcommand("train", "train a network");
  std::optional<std::string> resume;
  add_config_flags(train);
  train->add_option("--resume", resume, "checkpoint to resume from");

  auto* embed = app.add_subcommand("embed", "compute descriptors for a manifest");
  std::string embed_checkpoint, embed_manifest, embed_out;
  add_config_flags(embed);
  embed->add_option("--checkpoint", embed_checkpoint, "trained checkpoint")->required();
  embed->add_option("--manifest", embed_manifest, "manifest to embed")->required();
  embed->add_option("--out", embed_out, "output tensor file (.vtns)")->required();

  auto* eval = app.add_subcommand("eval", "CMC / mAP for query and gallery embeddings");
  std::string eval_query, eval_gallery;
  int eval_max_rank = 50;
  std::optional<std::string> cmc_out;
  eval->add_option("--query", eval_query, "query embeddings (.vtns)")->required();
  eval->add_option("--gallery", eval_gallery, "gallery embeddings (.vtns)")->required();
  eval->add_option("--max-rank", eval_max_rank, "CMC depth");
  eval->add_option("--cmc-out", cmc_out, "write the full CMC curve as CSV");

  auto* preview = app.add_subcommand("augment-preview",
                                     "write augmentation pairs and mask dumps");
  std::string preview_manifest, preview_out = "preview";
  int preview_n = 4;
  bool preview_masks = false;
  std::optional<std::string> preview_checkpoint;
  add_config_flags(preview);
  preview->add_option("--manifest", preview_manifest, "input manifest")->required();
  preview->add_option("--n", preview_n, "number of images");
  preview->add_option("--out", preview_out, "output directory");
  preview->add_flag("--dump-masks", preview_masks, "also dump attention masks");
  preview->add_option("--checkpoint", preview_checkpoint,
                      "checkpoint for mask dumps (default: fresh init)");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient sweep");
  std::uint64_t gc_seed = 20240113;
  int gc_instances = 20, gc_warmup = 48;
  gradcheck->add_option("--seed", gc_seed, "random seed");
  gradcheck->add_option("--instances", gc_instances, "random instances per op");
  gradcheck->add_option("--warmup", gc_warmup, "warm-up steps before the end-to-end check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (synth->parsed()) {
      return cmd_synth(synth_ids, synth_cams, synth_imgs, synth_height, synth_width,
                       synth_seed, synth_out);
    }
    if (train->parsed()) return cmd_train(make_config(), resume);
    if (embed->parsed()) {
      return cmd_embed(make_config(), embed_checkpoint, embed_manifest, embed_out);
    }
    if (eval->parsed()) return cmd_eval(eval_query, eval_gallery, eval_max_rank, cmc_out);
    if (preview->parsed()) {
      return cmd_augment_preview(make_config(), preview_manifest, preview_n,
                                 preview_out, preview_masks, preview_checkpoint);
    }
    if (gradcheck->parsed()) return cmd_gradcheck(gc_seed, gc_instances, gc_warmup);
  } catch (const vmrfa::ConfigError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const vmrfa::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
