#include "lkgp/model_io.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "lkgp/dataset_io.hpp"
#include "lkgp/errors.hpp"

namespace lkgp {

namespace {

using nlohmann::json;

json kernel_json(const KernelSpec& spec) {
  return std::visit(
      [](const auto& k) -> json {
        using T = std::decay_t<decltype(k)>;
        json out;
        if constexpr (std::is_same_v<T, SqExpKernel>) {
          out["family"] = "se";
          out["lengthscales"] = k.lengthscales;
          out["outputscale"] = k.outputscale;
        } else if constexpr (std::is_same_v<T, PeriodicKernel>) {
          out["family"] = "periodic";
          out["lengthscale"] = k.lengthscale;
          out["period"] = k.period;
          out["outputscale"] = k.outputscale;
        } else if constexpr (std::is_same_v<T, ProductTemporalKernel>) {
          out["family"] = "product";
          out["se"] = kernel_json(KernelSpec{k.se});
          out["periodic"] = kernel_json(KernelSpec{k.periodic});
        } else {
          out["family"] = "icm";
          out["tasks"] = k.tasks;
          std::vector<std::vector<double>> rows(k.tasks);
          for (std::size_t i = 0; i < k.tasks; ++i)
            for (std::size_t j = 0; j < k.tasks; ++j) rows[i].push_back(k.factor(i, j));
          out["factor"] = rows;
        }
        return out;
      },
      spec);
}

KernelSpec kernel_from(const json& parsed) {
  if (!parsed.contains("family")) throw ParseError("kernel json: missing family");
  const std::string family = parsed["family"].get<std::string>();
  if (family == "se") {
    SqExpKernel k;
    k.lengthscales = parsed.at("lengthscales").get<std::vector<double>>();
    k.outputscale = parsed.at("outputscale").get<double>();
    return k;
  }
  if (family == "periodic") {
    return PeriodicKernel{parsed.at("lengthscale").get<double>(),
                          parsed.at("period").get<double>(),
                          parsed.at("outputscale").get<double>()};
  }
  if (family == "product") {
    ProductTemporalKernel k;
    k.se = std::get<SqExpKernel>(kernel_from(parsed.at("se")));
    k.periodic = std::get<PeriodicKernel>(kernel_from(parsed.at("periodic")));
    return k;
  }
  if (family == "icm") {
    const auto tasks = parsed.at("tasks").get<std::size_t>();
    const auto rows = parsed.at("factor").get<std::vector<std::vector<double>>>();
    if (rows.size() != tasks) throw ParseError("kernel json: icm factor row count mismatch");
    IcmKernel k{tasks, Matrix(tasks, tasks)};
    for (std::size_t i = 0; i < tasks; ++i) {
      if (rows[i].size() != tasks)
        throw ParseError("kernel json: icm factor column count mismatch");
      for (std::size_t j = 0; j < tasks; ++j) k.factor(i, j) = rows[i][j];
    }
    return k;
  }
  throw ParseError("kernel json: unknown family '" + family + "'");
}

}  // namespace

std::string kernel_to_json(const KernelSpec& spec) { return kernel_json(spec).dump(); }

KernelSpec kernel_from_json(const std::string& text) {
  const auto parsed = json::parse(text, nullptr, false);
  if (parsed.is_discarded()) throw ParseError("kernel json: invalid document");
  return kernel_from(parsed);
}

std::string checkpoint_to_json(const Checkpoint& checkpoint) {
  json out;
  out["schema_version"] = 1;
  out["spatial_kernel"] = kernel_json(checkpoint.spatial_kernel);
  out["temporal_kernel"] = kernel_json(checkpoint.temporal_kernel);
  out["params"] = checkpoint.params;
  out["standardization"] = {{"mean", checkpoint.standardization.mean},
                            {"scale", checkpoint.standardization.scale}};
  if (checkpoint.mask) out["mask"] = json::parse(mask_to_json(*checkpoint.mask));
  return out.dump(2);
}

Checkpoint checkpoint_from_json(const std::string& text) {
  const auto parsed = json::parse(text, nullptr, false);
  if (parsed.is_discarded()) throw ParseError("checkpoint json: invalid document");
  Checkpoint cp{kernel_from(parsed.at("spatial_kernel")),
                kernel_from(parsed.at("temporal_kernel")),
                parsed.at("params").get<std::vector<double>>(),
                Standardization{parsed.at("standardization").at("mean").get<double>(),
                                parsed.at("standardization").at("scale").get<double>()},
                std::nullopt};
  if (parsed.contains("mask")) cp.mask = mask_from_json(parsed["mask"].dump());
  return cp;
}

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
  std::ofstream file(path);
  if (!file) throw ParseError("checkpoint: cannot write " + path);
  file << checkpoint_to_json(checkpoint) << "\n";
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream file(path);
  if (!file) throw ParseError("checkpoint: cannot open " + path);
  std::stringstream buffer;
  buffer << file.rdbuf();
  return checkpoint_from_json(buffer.str());
}

}  // namespace lkgp
