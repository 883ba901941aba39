#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <vector>

#include "keyfield/backends.hpp"
#include "keyfield/error.hpp"
#include "keyfield/mask_engine.hpp"
#include "keyfield/pipeline.hpp"
#include "keyfield/prompts.hpp"
#include "keyfield/service.hpp"

namespace py = pybind11;
using namespace keyfield;

namespace {

using Rows = std::vector<std::vector<int>>;

template <typename T>
Grid<T> to_grid(const Rows& rows) {
  if (rows.empty() || rows.front().empty()) {
    throw Error(ErrorCode::invalid_input, "grid must be a nonempty list of nonempty rows");
  }
  const int h = static_cast<int>(rows.size());
  const int w = static_cast<int>(rows.front().size());
  Grid<T> g(h, w, T{});
  for (int r = 0; r < h; ++r) {
    if (static_cast<int>(rows[r].size()) != w) {
      throw Error(ErrorCode::invalid_input, "grid rows differ in length");
    }
    for (int c = 0; c < w; ++c) g.at(r, c) = static_cast<T>(rows[r][c]);
  }
  return g;
}

template <typename T>
Rows from_grid(const Grid<T>& g) {
  Rows out(static_cast<std::size_t>(g.rows()));
  for (int r = 0; r < g.rows(); ++r) {
    for (int c = 0; c < g.cols(); ++c) out[r].push_back(static_cast<int>(g.at(r, c)));
  }
  return out;
}

Bytes to_bytes(const py::bytes& b) {
  const std::string s = b;
  return Bytes(s.begin(), s.end());
}

py::bytes from_bytes(const Bytes& b) {
  return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
}

std::vector<std::pair<std::string, std::string>> messages_out(const ChatMessages& m) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& msg : m) out.emplace_back(std::string(to_string(msg.role)), msg.content);
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of keyfield";

  static py::exception<Error> error_type(m, "KeyfieldError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object obj = py::handle(error_type.ptr())(e.what());
      obj.attr("code") = std::string(to_string(e.code()));
      obj.attr("stage") = e.stage().empty() ? py::object(py::none()) : py::str(e.stage());
      PyErr_SetObject(error_type.ptr(), obj.ptr());
    }
  });

  m.def("serialize_matrix", [](const Rows& cells) {
    return mask::serialize_matrix(to_grid<std::int32_t>(cells));
  });
  m.def("parse_matrix", [](const std::string& text) { return from_grid(mask::parse_matrix(text)); });
  m.def(
      "downscale_label_map",
      [](const Rows& label_map, int target_long_side) {
        return from_grid(mask::downscale_label_map(to_grid<std::int32_t>(label_map), target_long_side).cells);
      },
      py::arg("label_map"), py::arg("target_long_side") = mask::kDefaultTargetLongSide);
  m.def("resolve_overlaps", [](const std::vector<Rows>& masks) {
    std::vector<RawSegment> segs;
    for (std::size_t i = 0; i < masks.size(); ++i) {
      segs.push_back(make_segment(static_cast<int>(i) + 1, to_grid<std::uint8_t>(masks[i])));
    }
    return from_grid(mask::resolve_overlaps(segs));
  });

  m.def("parse_stage1", [](const std::string& t) { return stage1_to_json(parse_stage1(t)).dump(); });
  m.def("parse_stage2", [](const std::string& t) { return stage2_to_json(parse_stage2(t)).dump(); });
  m.def("build_stage1_prompt",
        [](const std::string& scene, const std::vector<std::tuple<int, std::string, std::array<int, 4>>>& objs,
           const std::string& question) {
          std::vector<PromptObject> po;
          for (const auto& [id, d, pos] : objs) po.push_back({id, d, pos});
          return messages_out(build_stage1_prompt(scene, std::span<const PromptObject>(po), question));
        });
  m.def(
      "build_stage2_prompt",
      [](const std::string& descriptor, const std::string& follow_up, const std::string& matrix,
         const std::string& ocr) {
        return messages_out(build_stage2_prompt(descriptor, follow_up, matrix, ocr));
      },
      py::arg("descriptor"), py::arg("follow_up"), py::arg("matrix_text"), py::arg("ocr_text") = "");

  m.def("needs_red_box", [](const Rows& mask) { return needs_red_box(to_grid<std::uint8_t>(mask)); });
  m.def(
      "render_overlay",
      [](const py::bytes& image, std::optional<Rows> mask, std::optional<std::array<int, 4>> box) {
        std::optional<Mask> grid;
        if (mask) grid = to_grid<std::uint8_t>(*mask);
        std::optional<BBox> fallback;
        if (box) fallback = BBox{(*box)[0], (*box)[1], (*box)[2], (*box)[3]};
        return from_bytes(render_overlay(to_bytes(image), grid ? &*grid : nullptr, fallback));
      },
      py::arg("image"), py::arg("mask") = py::none(), py::arg("box") = py::none());

  py::class_<Session>(m, "Session")
      .def_readonly("session_id", &Session::session_id)
      .def_readonly("scene_caption", &Session::scene_caption)
      .def_readonly("width", &Session::width)
      .def_readonly("height", &Session::height)
      .def("to_json", [](const Session& s) { return session_to_json(s).dump(); })
      .def("view_json", [](const Session& s) { return session_view_json(s).dump(); });

  py::class_<Pipeline>(m, "Pipeline")
      .def(py::init([](const std::string& backend, const std::string& fixtures) {
             BackendConfig cfg = BackendConfig::from_env();
             cfg.mode = parse_backend_mode(backend);
             if (!fixtures.empty()) cfg.fixture_dir = fixtures;
             return Pipeline(make_backends(cfg));
           }),
           py::arg("backend") = "mock", py::arg("fixtures") = "")
      .def("detect_objects",
           [](const Pipeline& p, const py::bytes& image) {
             const Bytes b = to_bytes(image);
             py::gil_scoped_release release;
             return p.detect_objects(b);
           })
      .def("answer_query",
           [](const Pipeline& p, Session& s, const std::string& question) {
             QueryRecord r;
             {
               py::gil_scoped_release release;
               r = p.answer_query(s, question);
             }
             return py::make_tuple(query_json(s, r).dump(), from_bytes(r.result.annotated_image));
           });
}
