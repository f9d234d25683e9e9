#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "../src/binio.hpp"
#include "mote/dataset.hpp"
#include "mote/error.hpp"
#include "mote/expert.hpp"
#include "mote/prototypes.hpp"
#include "oracles.hpp"
#include "temp_dir.hpp"

using namespace mote;

namespace {

EmbeddingDataset handmade(std::size_t dim, const std::vector<std::int32_t>& labels,
                          const std::vector<Vector>& features) {
    EmbeddingDataset ds;
    ds.name = "handmade";
    ds.dim = dim;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        Sample s;
        s.label = labels[i];
        s.features = features[i];
        ds.samples.push_back(std::move(s));
    }
    ds.rebuild_class_ids();
    return ds;
}

// An expert whose adapter is the exact identity (zero W_up), marked trained so
// the prototype paths accept it. Tests own the fields, so this is fair game.
AdapterExpert identity_expert(std::int32_t task_id, std::size_t dim,
                              std::vector<std::int32_t> scope) {
    AdapterExpert e = make_expert(task_id, dim, 1, AdapterMode::Seq, 1000 + task_id,
                                  std::move(scope));
    e.trained = true;
    return e;
}

EmbeddingDataset blobs(std::size_t classes, std::size_t per_class, std::uint64_t seed,
                       std::size_t dim = 16, double radius = 10.0, double sigma = 1.0) {
    SyntheticSpec spec;
    spec.n_classes = classes;
    spec.dim = dim;
    spec.samples_per_class = per_class;
    spec.cluster_radius = radius;
    spec.noise_sigma = sigma;
    spec.seed = seed;
    return generate_synthetic(spec);
}

AdapterExpert trained_expert(const EmbeddingDataset& data, std::int32_t task_id,
                             std::uint64_t seed) {
    AdapterExpert e = make_expert(task_id, data.dim, 4, AdapterMode::Par, seed, data.class_ids);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.seed = seed + 1;
    train_task(e, data, cfg);
    return e;
}

}  // namespace

TEST_CASE("single-sample prototype is the adapted feature") {
    EmbeddingDataset ds = handmade(3, {5}, {{1.0, -2.0, 0.5}});
    AdapterExpert e = make_expert(2, 3, 1, AdapterMode::Seq, 77, {5});
    SeededRng rng(3);
    for (double& w : e.w_up.data) w = rng.normal();  // make the adapter nontrivial
    e.trained = true;
    std::vector<Prototype> protos = compute_prototypes(e, ds);
    REQUIRE(protos.size() == 1);
    CHECK(protos[0].class_id == 5);
    CHECK(protos[0].task_id == 2);
    CHECK(protos[0].origin == 2);
    Vector expect = adapter_forward(e, ds.samples[0].features, ds.msa_of(ds.samples[0]));
    CHECK(protos[0].vec == expect);
}

TEST_CASE("two-sample prototype is the midpoint") {
    EmbeddingDataset ds = handmade(2, {3, 3}, {{1.0, 4.0}, {3.0, -2.0}});
    AdapterExpert e = identity_expert(0, 2, {3});
    std::vector<Prototype> protos = compute_prototypes(e, ds);
    REQUIRE(protos.size() == 1);
    CHECK(protos[0].vec[0] == (1.0 + 3.0) / 2.0);
    CHECK(protos[0].vec[1] == (4.0 + -2.0) / 2.0);
}

TEST_CASE("prototype matches a two-pass mean oracle") {
    EmbeddingDataset data = blobs(3, 50, 71);
    AdapterExpert e = trained_expert(data, 0, 5);
    std::vector<Prototype> protos = compute_prototypes(e, data);
    REQUIRE(protos.size() == 3);
    for (const Prototype& p : protos) {
        std::vector<std::vector<double>> adapted;
        for (const Sample& s : data.samples)
            if (s.label == p.class_id)
                adapted.push_back(adapter_forward(e, s.features, data.msa_of(s)));
        std::vector<double> ref = oracle::two_pass_mean(adapted);
        REQUIRE(ref.size() == p.vec.size());
        for (std::size_t k = 0; k < ref.size(); ++k)
            CHECK(p.vec[k] == doctest::Approx(ref[k]).epsilon(1e-12));
    }
}

TEST_CASE("compute_prototypes validation") {
    EmbeddingDataset data = blobs(2, 5, 3);
    AdapterExpert untrained = make_expert(0, 16, 4, AdapterMode::Par, 1, data.class_ids);
    CHECK_THROWS_AS(compute_prototypes(untrained, data), ValidationError);

    AdapterExpert e = trained_expert(data, 0, 5);
    EmbeddingDataset other = blobs(3, 5, 3);
    CHECK_THROWS_AS(compute_prototypes(e, other), ValidationError);  // class set mismatch

    // a class listed but absent from the samples
    EmbeddingDataset hollow = handmade(16, {0}, {Vector(16, 1.0)});
    hollow.class_ids = {0, 1};
    AdapterExpert wide = identity_expert(0, 16, {0, 1});
    CHECK_THROWS_AS(compute_prototypes(wide, hollow), ValidationError);
}

TEST_CASE("pool insertion keeps ids sorted and rejects bad prototypes") {
    PrototypePool pool;
    auto proto = [](std::int32_t cls, Vector v) {
        Prototype p;
        p.class_id = cls;
        p.task_id = 0;
        p.origin = 0;
        p.vec = std::move(v);
        return p;
    };
    pool.insert(proto(7, {1.0, 0.0}));
    pool.insert(proto(2, {0.0, 1.0}));
    pool.insert(proto(5, {1.0, 1.0}));
    CHECK(pool.class_ids() == std::vector<std::int32_t>{2, 5, 7});
    CHECK(pool.size() == 3);
    CHECK(pool.contains(5));
    CHECK_FALSE(pool.contains(4));
    CHECK(pool.task_of(7) == 0);

    CHECK_THROWS_AS(pool.insert(proto(7, {2.0, 2.0})), ValidationError);   // duplicate
    CHECK_THROWS_AS(pool.insert(proto(9, {})), ValidationError);           // empty
    CHECK_THROWS_AS(pool.insert(proto(9, {0.0, 0.0})), ValidationError);   // zero norm
    CHECK_THROWS_AS(pool.insert(proto(9, {1.0, 2.0, 3.0})), ValidationError);  // dim
    CHECK_THROWS_AS(pool.at(123), ValidationError);
}

TEST_CASE("scopes are explicit runtime state") {
    PrototypePool pool;
    pool.set_scope(0, {1, 2});
    pool.set_scope(1, {3});
    CHECK(pool.in_scope(0, 1));
    CHECK_FALSE(pool.in_scope(0, 3));
    CHECK_FALSE(pool.in_scope(9, 1));  // unregistered expert claims nothing
    CHECK_THROWS_AS(pool.scope_of(9), ValidationError);
    CHECK_THROWS_AS(pool.set_scope(2, {}), ValidationError);

    pool.extend_all_scopes({10, 11});
    CHECK(pool.scope_of(0) == std::set<std::int32_t>{1, 2, 10, 11});
    CHECK(pool.scope_of(1) == std::set<std::int32_t>{3, 10, 11});
}

TEST_CASE("single-expert overflow reduces to that expert's class mean") {
    EmbeddingDataset base = blobs(2, 10, 31);
    AdapterExpert e = trained_expert(base, 0, 6);
    PrototypePool pool;
    for (Prototype& p : compute_prototypes(e, base)) pool.insert(std::move(p));
    pool.set_scope(0, {base.class_ids.begin(), base.class_ids.end()});

    EmbeddingDataset next = blobs(2, 8, 32);
    for (Sample& s : next.samples) s.label += 2;  // shift into fresh ids {2, 3}
    next.rebuild_class_ids();

    std::vector<Prototype> merged =
        synthesize_overflow_prototypes({e}, pool, next, 1);
    REQUIRE(merged.size() == 2);
    for (const Prototype& p : merged) {
        CHECK(p.task_id == 1);
        CHECK(p.origin == kMergedOrigin);
        // one expert: weights collapse to {1}, merged mean is the plain mean
        Vector sum(next.dim, 0.0);
        std::size_t count = 0;
        for (const Sample& s : next.samples) {
            if (s.label != p.class_id) continue;
            Vector f = adapter_forward(e, s.features, next.msa_of(s));
            for (std::size_t k = 0; k < next.dim; ++k) sum[k] += f[k];
            ++count;
        }
        for (double& x : sum) x /= static_cast<double>(count);
        for (std::size_t k = 0; k < next.dim; ++k)
            CHECK(p.vec[k] == doctest::Approx(sum[k]).epsilon(1e-15));
    }
    // both experts' filtering scopes grew
    CHECK(pool.in_scope(0, 2));
    CHECK(pool.in_scope(0, 3));
}

TEST_CASE("identical experts merge to their common mean") {
    EmbeddingDataset base = blobs(2, 10, 41);
    AdapterExpert a = trained_expert(base, 0, 6);
    AdapterExpert b = a;
    b.task_id = 1;
    PrototypePool pool;
    for (Prototype& p : compute_prototypes(a, base)) pool.insert(std::move(p));
    std::set<std::int32_t> scope(base.class_ids.begin(), base.class_ids.end());
    pool.set_scope(0, scope);
    pool.set_scope(1, scope);
    b.scope = a.scope;

    EmbeddingDataset next = blobs(1, 6, 42);
    for (Sample& s : next.samples) s.label = 9;
    next.rebuild_class_ids();

    std::vector<Prototype> merged = synthesize_overflow_prototypes({a, b}, pool, next, 2);
    REQUIRE(merged.size() == 1);
    Vector sum(next.dim, 0.0);
    for (const Sample& s : next.samples) {
        Vector f = adapter_forward(a, s.features, next.msa_of(s));
        for (std::size_t k = 0; k < next.dim; ++k) sum[k] += f[k];
    }
    for (double& x : sum) x /= static_cast<double>(next.samples.size());
    // u = {1/2, 1/2} over two identical means
    for (std::size_t k = 0; k < next.dim; ++k)
        CHECK(merged[0].vec[k] == doctest::Approx(sum[k]).epsilon(1e-15));
}

TEST_CASE("handcrafted three-expert merge") {
    // All three experts are exact identities, so each sees the same class mean
    // m = [2, 0, 0, 0]; only their scope prototypes (and hence scores) differ.
    AdapterExpert e0 = identity_expert(0, 4, {0});
    AdapterExpert e1 = identity_expert(1, 4, {1});
    AdapterExpert e2 = identity_expert(2, 4, {2});
    auto fresh_pool = [] {
        PrototypePool pool;
        Prototype p0{0, 0, 0, {1.0, 0.0, 0.0, 0.0}};   // aligned: score +1
        Prototype p1{1, 1, 1, {0.0, 1.0, 0.0, 0.0}};   // orthogonal: score 0
        Prototype p2{2, 2, 2, {-1.0, 0.0, 0.0, 0.0}};  // opposed: score -1
        pool.insert(p0);
        pool.insert(p1);
        pool.insert(p2);
        pool.set_scope(0, {0});
        pool.set_scope(1, {1});
        pool.set_scope(2, {2});
        return pool;
    };
    EmbeddingDataset next = handmade(4, {10}, {{2.0, 0.0, 0.0, 0.0}});

    SUBCASE("clamped normalization keeps only the aligned expert") {
        PrototypePool pool = fresh_pool();
        std::vector<Prototype> merged = synthesize_overflow_prototypes(
            {e0, e1, e2}, pool, next, 3, MergeWeighting::ClampedNormalized);
        REQUIRE(merged.size() == 1);
        // weights (1, 0, 0) exactly: scores clamp to (1, 0, 0)
        CHECK(merged[0].vec == Vector{2.0, 0.0, 0.0, 0.0});
    }
    SUBCASE("raw weights cancel opposing experts") {
        PrototypePool pool = fresh_pool();
        std::vector<Prototype> merged = synthesize_overflow_prototypes(
            {e0, e1, e2}, pool, next, 3, MergeWeighting::Raw);
        // 1*m + 0*m + (-1)*m annihilates the prototype entirely; inserting the
        // zero vector is rejected downstream
        CHECK(merged[0].vec == Vector{0.0, 0.0, 0.0, 0.0});
        CHECK_THROWS_AS(pool.insert(merged[0]), ValidationError);
    }
    SUBCASE("softmax spreads mass but stays on the line") {
        PrototypePool pool = fresh_pool();
        std::vector<Prototype> merged = synthesize_overflow_prototypes(
            {e0, e1, e2}, pool, next, 3, MergeWeighting::Softmax);
        // all three means coincide, so any weights summing to one reproduce m
        for (std::size_t k = 0; k < 4; ++k)
            CHECK(merged[0].vec[k] == doctest::Approx(next.samples[0].features[k]).epsilon(1e-12));
    }
    SUBCASE("all-negative scores fall back to a plain average") {
        // flip every scope prototype so each expert's score goes negative
        PrototypePool flipped;
        Prototype q0{0, 0, 0, {-1.0, 0.0, 0.0, 0.0}};
        Prototype q1{1, 1, 1, {-0.5, -0.5, 0.0, 0.0}};
        Prototype q2{2, 2, 2, {-1.0, -1.0, 0.0, 0.0}};
        flipped.insert(q0);
        flipped.insert(q1);
        flipped.insert(q2);
        flipped.set_scope(0, {0});
        flipped.set_scope(1, {1});
        flipped.set_scope(2, {2});
        std::vector<Prototype> merged = synthesize_overflow_prototypes(
            {e0, e1, e2}, flipped, next, 3, MergeWeighting::ClampedNormalized);
        // uniform fallback over identical means reproduces m
        for (std::size_t k = 0; k < 4; ++k)
            CHECK(merged[0].vec[k] == doctest::Approx(next.samples[0].features[k]).epsilon(1e-12));
    }
}

TEST_CASE("merge scores consult each expert's own scope only") {
    // Expert 0 sees the new class exactly like its own class 0; expert 1's
    // adapted mean anti-correlates with its scope prototype, so clamping
    // silences it and the merge equals expert 0's mean.
    AdapterExpert e0 = identity_expert(0, 2, {0});
    AdapterExpert e1 = identity_expert(1, 2, {1});
    e1.w_down.at(0, 0) = 1.0;
    e1.w_down.at(1, 0) = 0.0;
    e1.w_up.at(0, 0) = 0.0;
    e1.w_up.at(0, 1) = 2.0;  // maps [1,0] to [1,2]
    PrototypePool pool;
    Prototype p0{0, 0, 0, {1.0, 0.0}};
    Prototype p1{1, 1, 1, {-1.0, 0.0}};
    pool.insert(p0);
    pool.insert(p1);
    pool.set_scope(0, {0});
    pool.set_scope(1, {1});

    EmbeddingDataset next = handmade(2, {5}, {{1.0, 0.0}});
    std::vector<Prototype> merged = synthesize_overflow_prototypes({e0, e1}, pool, next, 2);
    REQUIRE(merged.size() == 1);
    CHECK(merged[0].vec == Vector{1.0, 0.0});
}

TEST_CASE("clamped merge stays inside the per-coordinate envelope") {
    EmbeddingDataset base0 = blobs(2, 8, 51);
    EmbeddingDataset base1 = blobs(2, 8, 52);
    for (Sample& s : base1.samples) s.label += 2;
    base1.rebuild_class_ids();
    AdapterExpert a = trained_expert(base0, 0, 61);
    AdapterExpert b = trained_expert(base1, 1, 62);
    PrototypePool pool;
    for (Prototype& p : compute_prototypes(a, base0)) pool.insert(std::move(p));
    for (Prototype& p : compute_prototypes(b, base1)) pool.insert(std::move(p));
    pool.set_scope(0, {0, 1});
    pool.set_scope(1, {2, 3});

    EmbeddingDataset next = blobs(2, 6, 53);
    for (Sample& s : next.samples) s.label += 4;
    next.rebuild_class_ids();

    std::vector<Prototype> merged = synthesize_overflow_prototypes({a, b}, pool, next, 2);
    for (const Prototype& p : merged) {
        Vector ma(next.dim, 0.0), mb(next.dim, 0.0);
        std::size_t n = 0;
        for (const Sample& s : next.samples) {
            if (s.label != p.class_id) continue;
            Vector fa = adapter_forward(a, s.features, next.msa_of(s));
            Vector fb = adapter_forward(b, s.features, next.msa_of(s));
            for (std::size_t k = 0; k < next.dim; ++k) {
                ma[k] += fa[k];
                mb[k] += fb[k];
            }
            ++n;
        }
        for (std::size_t k = 0; k < next.dim; ++k) {
            ma[k] /= static_cast<double>(n);
            mb[k] /= static_cast<double>(n);
            double lo = std::min(ma[k], mb[k]) - 1e-9;
            double hi = std::max(ma[k], mb[k]) + 1e-9;
            CHECK(p.vec[k] >= lo);
            CHECK(p.vec[k] <= hi);
        }
    }
}

TEST_CASE("overflow synthesis validation") {
    EmbeddingDataset base = blobs(2, 5, 71);
    AdapterExpert e = trained_expert(base, 0, 6);
    PrototypePool pool;
    for (Prototype& p : compute_prototypes(e, base)) pool.insert(std::move(p));
    pool.set_scope(0, {0, 1});

    EmbeddingDataset next = blobs(1, 4, 72);
    for (Sample& s : next.samples) s.label = 7;
    next.rebuild_class_ids();

    CHECK_THROWS_AS(synthesize_overflow_prototypes({}, pool, next, 1), ValidationError);

    AdapterExpert raw = make_expert(1, 16, 4, AdapterMode::Par, 1, {7});
    CHECK_THROWS_AS(synthesize_overflow_prototypes({e, raw}, pool, next, 1), ValidationError);

    EmbeddingDataset empty;
    empty.dim = 16;
    CHECK_THROWS_AS(synthesize_overflow_prototypes({e}, pool, empty, 1), ValidationError);

    EmbeddingDataset clash = blobs(1, 4, 73);
    for (Sample& s : clash.samples) s.label = 1;  // already owned by the pool
    clash.rebuild_class_ids();
    CHECK_THROWS_AS(synthesize_overflow_prototypes({e}, pool, clash, 1), ValidationError);
}

TEST_CASE("pool checkpoint round-trip") {
    TempDir tmp("pool_rt");
    PrototypePool pool;
    Prototype a{0, 0, 0, {1.0, -0.25, 3.5}};
    Prototype b{3, 1, 1, {0.0, 2.0, -1.0}};
    Prototype c{9, 2, kMergedOrigin, {0.125, 0.5, 0.75}};  // merged prototypes persist too
    pool.insert(a);
    pool.insert(b);
    pool.insert(c);

    std::string path = tmp.file("pool.motp");
    save_pool(pool, path);
    PrototypePool back = load_pool(path);
    CHECK(back == pool);  // no scopes were set, so full equality holds
    CHECK(back.at(9).origin == kMergedOrigin);

    std::string again = tmp.file("pool2.motp");
    save_pool(back, again);
    CHECK(mote::binio::read_whole_file(path) == mote::binio::read_whole_file(again));

    // scopes are runtime state: they do not survive the disk round trip
    pool.set_scope(0, {0, 3});
    save_pool(pool, path);
    PrototypePool reloaded = load_pool(path);
    CHECK(reloaded.prototypes() == pool.prototypes());
    CHECK_THROWS_AS(reloaded.scope_of(0), ValidationError);

    PrototypePool empty;
    CHECK_THROWS_AS(save_pool(empty, tmp.file("empty.motp")), ValidationError);
}

TEST_CASE("pool checkpoint faults are distinct") {
    TempDir tmp("pool_faults");
    PrototypePool pool;
    Prototype a{1, 0, 0, {1.0, 2.0}};
    Prototype m{4, 1, kMergedOrigin, {-1.0, 0.5}};
    pool.insert(a);
    pool.insert(m);
    std::string path = tmp.file("good.motp");
    save_pool(pool, path);
    std::string good = mote::binio::read_whole_file(path);

    auto fault_of = [&](const std::string& bytes) {
        std::string p = tmp.file("bad.motp");
        mote::binio::write_whole_file(p, bytes);
        try {
            load_pool(p);
        } catch (const FileFormatError& err) {
            return err.fault();
        }
        FAIL("expected a file format error");
        return FileFault::BadMagic;
    };

    std::string bad_magic = good;
    bad_magic[0] = 'Q';
    CHECK(fault_of(bad_magic) == FileFault::BadMagic);

    std::string bad_version = good;
    bad_version[4] = 3;
    CHECK(fault_of(bad_version) == FileFault::BadVersion);

    std::string truncated = good.substr(0, good.size() - 1);
    CHECK(fault_of(truncated) == FileFault::Truncated);

    // first record: class id at byte 16, task at 20, origin at 24
    std::string bad_class = good;
    bad_class[19] = static_cast<char>(0x80);
    CHECK(fault_of(bad_class) == FileFault::LabelRange);

    std::string bad_origin = good;
    bad_origin[24] = static_cast<char>(0xFE);
    bad_origin[25] = static_cast<char>(0xFF);
    bad_origin[26] = static_cast<char>(0xFF);
    bad_origin[27] = static_cast<char>(0xFF);  // origin -2: negative but not the merged marker
    CHECK(fault_of(bad_origin) == FileFault::LabelRange);

    std::string trailing = good + "!";
    std::string p = tmp.file("trail.motp");
    mote::binio::write_whole_file(p, trailing);
    CHECK_THROWS_AS(load_pool(p), IoError);

    CHECK_THROWS_AS(load_pool(tmp.file("missing.motp")), IoError);
}
