#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "model_fixture.hpp"
#include "qgs/checkpoint.hpp"
#include "qgs/error.hpp"
#include "qgs/gradcheck.hpp"

using namespace qgs;
using namespace qgs::testing;

namespace {

template <class T>
ModelOutputs<T> eval_forward(const QgsModel<T>& model, Tape<T>& tape, const Batch& b) {
  return model.forward(tape, b, false, nullptr);
}

}  // namespace

TEST_CASE("every variant runs a forward and backward pass") {
  const auto g = tiny_generator();
  const auto tb = tiny_batch(g, 3);
  for (Variant v : all_variants()) {
    CAPTURE(to_string(v));
    ParamSet<float> ps;
    QgsModel<float> model(tiny_model(g, v), ps);
    Tape<float> tape;
    std::mt19937_64 rng(1);
    auto out = model.forward(tape, tb.batch, true, &rng);
    CHECK(std::isfinite(out.total.value()[0]));
    CHECK(out.ctr_logits.rows() == tb.batch.requests.size() * (g.num_negatives + 1));
    tape.backward(out.total);
    double norm = 0;
    for (std::size_t i = 0; i < ps.size(); ++i)
      for (float x : ps[i].grad.values()) norm += std::abs(x);
    CHECK(norm > 0);
  }
}

TEST_CASE("variant structure") {
  const auto g = tiny_generator();
  ParamSet<float> full_ps, io_ps, nohfg_ps, ext_ps;
  QgsModel<float> full(tiny_model(g), full_ps);
  QgsModel<float> io(tiny_model(g, Variant::item_only), io_ps);
  QgsModel<float> nohfg(tiny_model(g, Variant::no_hfg), nohfg_ps);
  QgsModel<float> ext(tiny_model(g, Variant::external_embedder), ext_ps);
  CHECK(full.head().first().in_dim() == 8 + 4);
  CHECK(io.head().first().in_dim() == 8);
  CHECK(full_ps.find("hfg.out.w") != nullptr);
  CHECK(nohfg_ps.find("hfg.out.w") == nullptr);
  REQUIRE(ext_ps.find("ext_cls") != nullptr);
  CHECK_FALSE(ext_ps.at("ext_cls").trainable);
  CHECK_FALSE(ext_ps.at("ext_sep").trainable);
  CHECK(ext_ps.at("ext_cls").value.dim(0) == g.query_vocab_size() * g.vocab_size());
}

TEST_CASE("no_context_features ignores the raw features") {
  const auto g = tiny_generator();
  auto tb = tiny_batch(g, 2);
  ParamSet<float> ps;
  QgsModel<float> model(tiny_model(g, Variant::no_context_features), ps);
  Tape<float> t1(false);
  const auto h1 = model.encode(t1, tb.batch, false, nullptr).value();
  for (auto& f : tb.batch.features) f += 3.0f;
  Tape<float> t2(false);
  CHECK(model.encode(t2, tb.batch, false, nullptr).value() == h1);
}

TEST_CASE("next query changes z_t but no encoder output up to t") {
  const auto g = tiny_generator();
  for (Variant v : {Variant::full, Variant::item_only}) {
    auto tb = tiny_batch(g, 2);
    tb.batch.requests.clear();
    ParamSet<float> ps;
    QgsModel<float> model(tiny_model(g, v), ps);
    const std::size_t t = 3;
    Tape<float> t1(false);
    auto a = eval_forward(model, t1, tb.batch);
    tb.batch.query_ids[t + 1] = (tb.batch.query_ids[t + 1] + 1) % g.query_vocab_size();
    Tape<float> t2(false);
    auto b = eval_forward(model, t2, tb.batch);
    const auto &ha = a.hidden.value(), &hb = b.hidden.value();
    for (std::size_t r = 0; r <= t; ++r)
      for (std::size_t j = 0; j < ha.cols(); ++j) CHECK(ha.at(r, j) == hb.at(r, j));
    bool later_changed = false;
    for (std::size_t j = 0; j < ha.cols(); ++j) later_changed |= ha.at(t + 1, j) != hb.at(t + 1, j);
    CHECK(later_changed);
    bool z_changed = false;
    for (std::size_t j = 0; j < a.z.cols(); ++j) z_changed |= a.z.value().at(t, j) != b.z.value().at(t, j);
    CHECK(z_changed == (v == Variant::full));
    for (std::size_t s = 0; s < t; ++s)
      for (std::size_t j = 0; j < a.z.cols(); ++j) CHECK(a.z.value().at(s, j) == b.z.value().at(s, j));
  }
}

TEST_CASE("zero tower and generative weight leave the tower bias") {
  const auto g = tiny_generator();
  const auto tb = tiny_batch(g, 2);
  ParamSet<float> ps;
  QgsModel<float> model(tiny_model(g), ps);
  ps.at("tower.l2.w").value.fill(0.0f);
  ps.at("tower.l2.b").value[0] = 0.25f;
  ps.at("fuse.gen_weight").value[0] = 0.0f;
  Tape<float> tape(false);
  for (float x : eval_forward(model, tape, tb.batch).ctr_logits.value().values()) CHECK(x == 0.25f);
}

TEST_CASE("eval forward is deterministic and checkpoints reproduce it bit-exactly") {
  const auto g = tiny_generator();
  const auto tb = tiny_batch(g, 3);
  const auto cfg = tiny_model(g);
  ParamSet<float> ps;
  QgsModel<float> model(cfg, ps);
  for (std::size_t i = 0; i < ps.size(); ++i)
    for (auto& x : ps[i].value.values()) x += 0.01f * float(i % 7);
  Tape<float> t1(false), t2(false);
  const auto a = eval_forward(model, t1, tb.batch);
  const auto b = eval_forward(model, t2, tb.batch);
  CHECK(a.total.value() == b.total.value());

  const auto path = std::filesystem::temp_directory_path() / "qgs_test_model.qgsc";
  save_checkpoint(path.string(), to_checkpoint(ps));
  auto other_cfg = cfg;
  other_cfg.init_seed = 99;
  ParamSet<float> fresh;
  QgsModel<float> restored(other_cfg, fresh);
  apply_checkpoint(load_checkpoint(path.string()), fresh);
  std::filesystem::remove(path);
  Tape<float> t3(false);
  const auto c = eval_forward(restored, t3, tb.batch);
  CHECK(c.total.value() == a.total.value());
  CHECK(c.hidden.value() == a.hidden.value());
  CHECK(c.z.value() == a.z.value());
  CHECK(c.ctr_logits.value() == a.ctr_logits.value());
}

TEST_CASE("streaming tokens replay the batch encoder") {
  const auto g = tiny_generator(12, 1);
  const auto tb = tiny_batch(g, 1);
  ParamSet<float> ps;
  QgsModel<float> model(tiny_model(g), ps);
  Tape<float> tape(false);
  const auto h = model.encode(tape, tb.batch, false, nullptr).value();
  auto state = model.encoder().make_state(16);
  for (std::size_t t = 0; t < tb.batch.len; ++t) {
    const auto h0 = model.stream_token(tb.batch.query_ids[t], tb.batch.item_ids[t],
                                       &tb.batch.features[t * kContextDim], t);
    const auto out = model.encoder().stream_step(state, h0);
    for (std::size_t j = 0; j < out.size(); ++j) CHECK(std::abs(out[j] - h.at(t, j)) < 1e-4);
  }
}

TEST_CASE("full model gradient matches finite differences") {
  const auto g = tiny_generator(8, 2);
  const auto tb = tiny_batch(g, 2);
  for (Variant v : {Variant::full, Variant::item_only, Variant::no_hfg, Variant::quadratic_encoder}) {
    CAPTURE(to_string(v));
    ParamSet<double> ps;
    QgsModel<double> model(tiny_model(g, v), ps);
    // Zero-initialised biases put ReLU inputs exactly on the kink.
    std::mt19937_64 rng(11);
    std::normal_distribution<double> jitter(0.0, 0.05);
    std::vector<Parameter<double>*> params;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      for (auto& x : ps[i].value.values()) x += jitter(rng);
      if (ps[i].trainable) params.push_back(&ps[i]);
    }
    const auto r = grad_check(
        [&](Tape<double>& tape) { return model.forward(tape, tb.batch, false, nullptr).total; }, params, 1e-6, 24, 3);
    CAPTURE(r.worst_param);
    CAPTURE(r.worst_analytic);
    CAPTURE(r.worst_numeric);
    CHECK(r.max_rel_error < 1e-3);
  }
}

TEST_CASE("bad requests and ids are rejected") {
  const auto g = tiny_generator();
  auto tb = tiny_batch(g, 2);
  ParamSet<float> ps;
  QgsModel<float> model(tiny_model(g), ps);
  tb.batch.requests[0].row = 0;
  Tape<float> tape(false);
  CHECK_THROWS_AS(model.forward(tape, tb.batch, false, nullptr), Error);
  auto tb2 = tiny_batch(g, 2);
  tb2.batch.item_ids[0] = 999;
  Tape<float> tape2(false);
  CHECK_THROWS_AS(model.forward(tape2, tb2.batch, false, nullptr), Error);
}
