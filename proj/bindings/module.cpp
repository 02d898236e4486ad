// Python bindings for the main operations: dataset synthesis, trigger
// injection, training, trigger inversion scans, and metrics.
#include <torch/extension.h>

#include "tforge/config.hpp"
#include "tforge/data.hpp"
#include "tforge/metrics.hpp"

namespace py = pybind11;
using namespace tforge;

namespace {

ImageBatch to_batch(torch::Tensor pixels, torch::Tensor labels) {
  ImageBatch b{pixels.to(torch::kFloat32).contiguous(), labels.to(torch::kInt64), {}};
  b.validate();
  return b;
}

}  // namespace

PYBIND11_MODULE(_tforge, m) {
  m.doc() = "backdoor trigger injection and inversion toolkit";

  m.def("make_synthetic",
        [](int64_t n_train, int64_t n_test, uint64_t seed, int64_t k) {
          auto d = make_synthetic(n_train, n_test, seed, k);
          return py::make_tuple(d.train.pixels, d.train.labels, d.test.pixels,
                                d.test.labels);
        },
        py::arg("n_train") = 2000, py::arg("n_test") = 1000, py::arg("seed") = 0,
        py::arg("num_classes") = 10);

  m.def("load_cifar10", [](const std::string& root) {
    auto d = load_dataset("cifar10", root);
    return py::make_tuple(d.train.pixels, d.train.labels, d.test.pixels,
                          d.test.labels);
  });

  m.def("make_trigger_spec",
        [](const std::string& family, int64_t target, int64_t c, int64_t h,
           int64_t w, uint64_t seed) {
          return make_trigger_spec(family_from_name(family), target, c, h, w, seed)
              .to_json();
        },
        py::arg("family"), py::arg("target_label"), py::arg("channels") = 3,
        py::arg("height") = 32, py::arg("width") = 32, py::arg("seed") = 0);

  m.def("apply_trigger", [](torch::Tensor pixels, const std::string& spec_json) {
    auto spec = TriggerSpec::from_json(spec_json);
    return apply_trigger_pixels(pixels.to(torch::kFloat32).contiguous(), spec);
  });

  m.def("poison_dataset",
        [](torch::Tensor pixels, torch::Tensor labels, const std::string& spec_json,
           uint64_t seed) {
          auto out = poison_dataset(to_batch(pixels, labels),
                                    TriggerSpec::from_json(spec_json), seed);
          return py::make_tuple(out.pixels, out.labels, out.poisoned_indices);
        });

  m.def("ssim", [](torch::Tensor a, torch::Tensor b) {
    return ssim(a.to(torch::kFloat32), b.to(torch::kFloat32)).item<double>();
  });

  m.def("train_model",
        [](const std::string& arch, torch::Tensor pixels, torch::Tensor labels,
           int64_t epochs, uint64_t seed, const std::string& spec_json,
           const std::string& checkpoint_out, bool adv_mask) {
          auto data = to_batch(pixels, labels);
          auto model = build_model(arch, data.num_classes(),
                                   {data.channels(), data.height(), data.width()});
          TrainConfig tc;
          tc.epochs = epochs;
          tc.seed = seed;
          tc.adv_mask = adv_mask;
          std::optional<TriggerSpec> spec;
          if (!spec_json.empty()) {
            spec = TriggerSpec::from_json(spec_json);
            tc.training_controlled = needs_training_control(spec->family);
          }
          auto ckpt = train_model(*model, data, tc, spec);
          if (!checkpoint_out.empty()) ckpt.save(checkpoint_out, *model);
          return checkpoint_out;
        },
        py::arg("arch"), py::arg("pixels"), py::arg("labels"),
        py::arg("epochs") = 5, py::arg("seed") = 0, py::arg("spec_json") = "",
        py::arg("checkpoint_out") = "", py::arg("adv_mask") = false,
        py::call_guard<py::gil_scoped_release>());

  m.def("evaluate_checkpoint",
        [](const std::string& checkpoint, torch::Tensor pixels, torch::Tensor labels,
           const std::string& spec_json) {
          double acc, asr;
          {
            py::gil_scoped_release nogil;
            auto [ckpt, model] = Checkpoint::load(checkpoint);
            std::optional<TriggerSpec> spec;
            if (!spec_json.empty()) spec = TriggerSpec::from_json(spec_json);
            auto [a, s] = evaluate(*model, to_batch(pixels, labels), spec);
            acc = a;
            asr = s ? *s : -1.0;
          }
          return py::make_tuple(acc, asr);
        },
        py::arg("checkpoint"), py::arg("pixels"), py::arg("labels"),
        py::arg("spec_json") = "");

  m.def("scan_checkpoint",
        [](const std::string& checkpoint, torch::Tensor test_pixels,
           torch::Tensor test_labels, const std::string& engine, int64_t per_class,
           int64_t steps, uint64_t seed, const std::string& log_dir,
           int64_t only_label) {
          InversionReport report;
          Verdict v;
          {
            py::gil_scoped_release nogil;
            auto [ckpt, model] = Checkpoint::load(checkpoint);
            auto [defense, heldout] = split_defense(
                to_batch(test_pixels, test_labels), per_class, seed + 13);
            if (engine == "nc") {
              NCConfig c;
              c.steps = steps;
              c.seed = seed;
              c.log_dir = log_dir;
              if (only_label >= 0) {
                report.engine = "nc";
                report.rows.push_back(
                    nc_invert_for_label(*model, defense, heldout, only_label, c)
                        .second);
              } else {
                report = nc_scan(*model, defense, heldout, c);
              }
            } else {
              InvertConfig c;
              c.steps = steps;
              c.seed = seed;
              c.log_dir = log_dir;
              if (only_label >= 0) {
                report.engine = "unicorn";
                report.rows.push_back(invert_for_label(*model, defense, heldout,
                                                       only_label,
                                                       ConstraintBudget{}, c)
                                          .second);
              } else {
                report = scan_model(*model, defense, heldout, ConstraintBudget{}, c);
              }
            }
            v = decide_backdoor(report);
          }
          return py::make_tuple(report.to_json(), v.backdoored, v.target_label,
                                v.max_asr_inv);
        },
        py::arg("checkpoint"), py::arg("test_pixels"), py::arg("test_labels"),
        py::arg("engine") = "unicorn", py::arg("per_class") = 10,
        py::arg("steps") = 2000, py::arg("seed") = 0, py::arg("log_dir") = "",
        py::arg("only_label") = -1);
}
