#include <doctest.h>

#include <cmath>
#include <cstring>

#include "cted/control.hpp"

using namespace cted;

namespace {

QkvTriple random_triple(Prng& prng, int rows, int cols, int split) {
    QkvTriple t;
    t.q = randn(prng, {size_t(rows), size_t(cols)});
    t.k = randn(prng, {size_t(rows), size_t(cols)});
    t.v = randn(prng, {size_t(rows), size_t(cols)});
    t.split = split;
    return t;
}

EditMask random_mask(Prng& prng, size_t n) {
    EditMask m = EditMask::all_zeros(n);
    for (size_t j = 0; j < n; ++j) {
        const bool on = prng.next() & 1;
        m.binary[j] = on ? 1 : 0;
        m.scores[j] = on ? 1.0f : 0.0f;
    }
    return m;
}

bool rows_equal(const Tensor& a, size_t row_a, const Tensor& b, size_t row_b) {
    return std::memcmp(a.row(row_a), b.row(row_b), a.dim(1) * sizeof(float)) == 0;
}

// Scalar reference: per-element select between hat rows and target rows.
enum class Pick { Target, Hat, HatV, SourceV };

void check_vision_rows(const QkvTriple& fused, const QkvTriple& hat, const QkvTriple& target,
                       const EditMask& mask, Pick q_edit, Pick q_nonedit, Pick v_edit,
                       Pick v_nonedit) {
    const size_t split = size_t(target.split);
    auto pick = [&](Pick p, const Tensor& hat_t, const Tensor& tgt_t, size_t row) -> const Tensor& {
        (void)row;
        return p == Pick::Target ? tgt_t : hat_t;
    };
    for (size_t j = 0; j < mask.size(); ++j) {
        const size_t row = split + j;
        const Pick qp = mask.binary[j] ? q_edit : q_nonedit;
        const Pick vp = mask.binary[j] ? v_edit : v_nonedit;
        CHECK(rows_equal(fused.q, row, pick(qp, hat.q, target.q, row), row));
        CHECK(rows_equal(fused.k, row, pick(qp, hat.k, target.k, row), row));
        CHECK(rows_equal(fused.v, row, pick(vp, hat.v, target.v, row), row));
    }
}

FusionContext make_ctx(int step, int total, double alpha, const EditMask& mask,
                       const QkvTriple& source) {
    FusionContext ctx;
    ctx.step = step;
    ctx.total_steps = total;
    ctx.alpha = alpha;
    ctx.mask = &mask;
    ctx.source = &source;
    return ctx;
}

}  // namespace

TEST_CASE("make_hat splices text and vision parts") {
    Prng prng(1);
    const QkvTriple source = random_triple(prng, 5, 4, 2);
    const QkvTriple target = random_triple(prng, 5, 4, 2);

    const QkvTriple hat = make_hat(source, target);
    for (size_t r = 0; r < 2; ++r) {
        CHECK(rows_equal(hat.q, r, target.q, r));
        CHECK(rows_equal(hat.k, r, target.k, r));
        CHECK(rows_equal(hat.v, r, target.v, r));
    }
    for (size_t r = 2; r < 5; ++r) {
        CHECK(rows_equal(hat.q, r, source.q, r));
        CHECK(rows_equal(hat.k, r, source.k, r));
        CHECK(rows_equal(hat.v, r, source.v, r));
    }

    const QkvTriple self_hat = make_hat(target, target);
    CHECK(self_hat.q.bitwise_equal(target.q));
    CHECK(self_hat.k.bitwise_equal(target.k));
    CHECK(self_hat.v.bitwise_equal(target.v));
}

TEST_CASE("make_hat minimal example") {
    Prng prng(2);
    const QkvTriple source = random_triple(prng, 2, 3, 1);
    const QkvTriple target = random_triple(prng, 2, 3, 1);
    const QkvTriple hat = make_hat(source, target);
    CHECK(rows_equal(hat.q, 0, target.q, 0));
    CHECK(rows_equal(hat.q, 1, source.q, 1));
}

TEST_CASE("make_hat rejects mismatched triples") {
    Prng prng(3);
    const QkvTriple a = random_triple(prng, 4, 4, 2);
    QkvTriple b = random_triple(prng, 4, 4, 2);
    b.split = 1;
    CHECK_THROWS_AS(make_hat(a, b), ShapeError);
    QkvTriple c = random_triple(prng, 5, 4, 2);
    CHECK_THROWS_AS(make_hat(a, c), ShapeError);
}

TEST_CASE("schedule_active follows the strict threshold") {
    for (int t = 1; t <= 28; ++t) {
        CHECK(schedule_active(t, 28, 1.0));
        CHECK_FALSE(schedule_active(t, 28, 0.0));
    }
    // threshold 19.6: steps 20..28
    for (int t = 1; t <= 28; ++t) {
        CHECK(schedule_active(t, 28, 0.3) == (t >= 20));
    }
    // alpha = 0.5: the product is exactly 14.0 and step 14 stays inactive
    CHECK_FALSE(schedule_active(14, 28, 0.5));
    CHECK(schedule_active(15, 28, 0.5));
}

TEST_CASE("fuse_structure locks structure under a full mask") {
    Prng prng(4);
    const QkvTriple source = random_triple(prng, 6, 4, 2);
    const QkvTriple target = random_triple(prng, 6, 4, 2);
    const EditMask ones = EditMask::all_ones(4);
    const FusionContext ctx = make_ctx(5, 10, 1.0, ones, source);
    const QkvTriple fused = fuse_structure(ctx, target);
    for (size_t r = 2; r < 6; ++r) {
        CHECK(rows_equal(fused.q, r, source.q, r));
        CHECK(rows_equal(fused.k, r, source.k, r));
        CHECK(rows_equal(fused.v, r, target.v, r));
    }
    for (size_t r = 0; r < 2; ++r) CHECK(rows_equal(fused.q, r, target.q, r));
}

TEST_CASE("fuse_structure is the identity when inactive") {
    Prng prng(5);
    const QkvTriple source = random_triple(prng, 6, 4, 2);
    const QkvTriple target = random_triple(prng, 6, 4, 2);
    const EditMask ones = EditMask::all_ones(4);
    const FusionContext ctx = make_ctx(2, 10, 0.5, ones, source);  // 2 <= 5
    const QkvTriple fused = fuse_structure(ctx, target);
    CHECK(fused.q.bitwise_equal(target.q));
    CHECK(fused.k.bitwise_equal(target.k));
    CHECK(fused.v.bitwise_equal(target.v));
}

TEST_CASE("fuse_structure matches the select oracle") {
    Prng prng(6);
    for (int rep = 0; rep < 200; ++rep) {
        const QkvTriple source = random_triple(prng, 6, 3, 2);
        const QkvTriple target = random_triple(prng, 6, 3, 2);
        const EditMask mask = random_mask(prng, 4);
        const int t = 1 + int(prng.next() % 10);
        const double alpha = double(prng.next() % 5) / 4.0;
        const FusionContext ctx = make_ctx(t, 10, alpha, mask, source);
        const QkvTriple fused = fuse_structure(ctx, target);
        const QkvTriple hat = make_hat(source, target);
        if (schedule_active(t, 10, alpha)) {
            check_vision_rows(fused, hat, target, mask, Pick::Hat, Pick::Target, Pick::Target,
                              Pick::Target);
        } else {
            CHECK(fused.q.bitwise_equal(target.q));
            CHECK(fused.k.bitwise_equal(target.k));
            CHECK(fused.v.bitwise_equal(target.v));
        }
        for (int r = 0; r < 2; ++r) {
            CHECK(rows_equal(fused.q, size_t(r), target.q, size_t(r)));
            CHECK(rows_equal(fused.k, size_t(r), target.k, size_t(r)));
            CHECK(rows_equal(fused.v, size_t(r), target.v, size_t(r)));
        }
    }
}

TEST_CASE("fuse_consistedit active step takes hat Q,K everywhere") {
    Prng prng(7);
    const QkvTriple source = random_triple(prng, 6, 4, 2);
    const QkvTriple target = random_triple(prng, 6, 4, 2);
    const EditMask mask = random_mask(prng, 4);
    const FusionContext ctx = make_ctx(9, 10, 1.0, mask, source);
    const QkvTriple fused = fuse_consistedit(ctx, target);
    const QkvTriple hat = make_hat(source, target);
    for (size_t r = 2; r < 6; ++r) {
        CHECK(rows_equal(fused.q, r, hat.q, r));
        CHECK(rows_equal(fused.k, r, hat.k, r));
    }
}

TEST_CASE("fuse_consistedit zero mask reproduces the source inputs") {
    Prng prng(8);
    const QkvTriple source = random_triple(prng, 6, 4, 2);
    const QkvTriple target = random_triple(prng, 6, 4, 2);
    const EditMask zeros = EditMask::all_zeros(4);
    for (int t : {1, 4, 10}) {
        const FusionContext ctx = make_ctx(t, 10, 0.5, zeros, source);
        const QkvTriple fused = fuse_consistedit(ctx, target);
        for (size_t r = 2; r < 6; ++r) {
            CHECK(rows_equal(fused.q, r, source.q, r));
            CHECK(rows_equal(fused.k, r, source.k, r));
            CHECK(rows_equal(fused.v, r, source.v, r));
        }
        for (size_t r = 0; r < 2; ++r) {
            CHECK(rows_equal(fused.q, r, target.q, r));
            CHECK(rows_equal(fused.v, r, target.v, r));
        }
    }
}

TEST_CASE("fuse_consistedit matches the select oracle across phases") {
    Prng prng(9);
    for (int rep = 0; rep < 200; ++rep) {
        const QkvTriple source = random_triple(prng, 6, 3, 2);
        const QkvTriple target = random_triple(prng, 6, 3, 2);
        const EditMask mask = random_mask(prng, 4);
        const int t = 1 + int(prng.next() % 10);
        const double alpha = double(prng.next() % 5) / 4.0;
        const FusionContext ctx = make_ctx(t, 10, alpha, mask, source);
        const QkvTriple fused = fuse_consistedit(ctx, target);
        const QkvTriple hat = make_hat(source, target);
        const bool active = schedule_active(t, 10, alpha);
        check_vision_rows(fused, hat, target, mask,
                          /*q_edit=*/active ? Pick::Hat : Pick::Target,
                          /*q_nonedit=*/Pick::Hat,
                          /*v_edit=*/Pick::Target,
                          /*v_nonedit=*/Pick::Hat);
    }
}

TEST_CASE("fuse_consistedit_star transfers everything at full strength") {
    Prng prng(10);
    const QkvTriple source = random_triple(prng, 6, 4, 2);
    const QkvTriple target = random_triple(prng, 6, 4, 2);
    const EditMask mask = random_mask(prng, 4);
    for (int t = 1; t <= 10; ++t) {
        const FusionContext ctx = make_ctx(t, 10, 1.0, mask, source);
        const QkvTriple fused = fuse_consistedit_star(ctx, target);
        for (size_t r = 2; r < 6; ++r) {
            CHECK(rows_equal(fused.q, r, source.q, r));
            CHECK(rows_equal(fused.k, r, source.k, r));
            CHECK(rows_equal(fused.v, r, source.v, r));
        }
    }
}

TEST_CASE("fuse_consistedit_star at alpha zero equals fuse_consistedit") {
    Prng prng(11);
    for (int rep = 0; rep < 50; ++rep) {
        const QkvTriple source = random_triple(prng, 6, 3, 2);
        const QkvTriple target = random_triple(prng, 6, 3, 2);
        const EditMask mask = random_mask(prng, 4);
        const int t = 1 + int(prng.next() % 10);
        const FusionContext ctx = make_ctx(t, 10, 0.0, mask, source);
        const QkvTriple a = fuse_consistedit_star(ctx, target);
        const QkvTriple b = fuse_consistedit(ctx, target);
        CHECK(a.q.bitwise_equal(b.q));
        CHECK(a.k.bitwise_equal(b.k));
        CHECK(a.v.bitwise_equal(b.v));
    }
}

TEST_CASE("fuse_consistedit_star matches the select oracle") {
    Prng prng(12);
    for (int rep = 0; rep < 200; ++rep) {
        const QkvTriple source = random_triple(prng, 6, 3, 2);
        const QkvTriple target = random_triple(prng, 6, 3, 2);
        const EditMask mask = random_mask(prng, 4);
        const int t = 1 + int(prng.next() % 10);
        const double alpha = double(prng.next() % 5) / 4.0;
        const FusionContext ctx = make_ctx(t, 10, alpha, mask, source);
        const QkvTriple fused = fuse_consistedit_star(ctx, target);
        const QkvTriple hat = make_hat(source, target);
        const bool active = schedule_active(t, 10, alpha);
        check_vision_rows(fused, hat, target, mask,
                          /*q_edit=*/active ? Pick::Hat : Pick::Target,
                          /*q_nonedit=*/Pick::Hat,
                          /*v_edit=*/active ? Pick::Hat : Pick::Target,
                          /*v_nonedit=*/Pick::Hat);
    }
}

TEST_CASE("text rows never change under any fusion mode") {
    Prng prng(13);
    for (int rep = 0; rep < 100; ++rep) {
        const QkvTriple source = random_triple(prng, 7, 4, 3);
        const QkvTriple target = random_triple(prng, 7, 4, 3);
        const EditMask mask = random_mask(prng, 4);
        const int t = 1 + int(prng.next() % 8);
        const double alpha = double(prng.next() % 5) / 4.0;
        const FusionContext ctx = make_ctx(t, 8, alpha, mask, source);
        for (int mode = 0; mode < 3; ++mode) {
            const QkvTriple fused = mode == 0   ? fuse_structure(ctx, target)
                                    : mode == 1 ? fuse_consistedit(ctx, target)
                                                : fuse_consistedit_star(ctx, target);
            for (size_t r = 0; r < 3; ++r) {
                CHECK(rows_equal(fused.q, r, target.q, r));
                CHECK(rows_equal(fused.k, r, target.k, r));
                CHECK(rows_equal(fused.v, r, target.v, r));
            }
        }
    }
}

TEST_CASE("every fused vision row is either the hat row or the target row") {
    Prng prng(14);
    for (int rep = 0; rep < 100; ++rep) {
        const QkvTriple source = random_triple(prng, 6, 3, 2);
        const QkvTriple target = random_triple(prng, 6, 3, 2);
        const EditMask mask = random_mask(prng, 4);
        const int t = 1 + int(prng.next() % 8);
        const double alpha = double(prng.next() % 5) / 4.0;
        const FusionContext ctx = make_ctx(t, 8, alpha, mask, source);
        for (int mode = 0; mode < 3; ++mode) {
            const QkvTriple fused = mode == 0   ? fuse_structure(ctx, target)
                                    : mode == 1 ? fuse_consistedit(ctx, target)
                                                : fuse_consistedit_star(ctx, target);
            const QkvTriple hat = make_hat(source, target);
            for (size_t r = 2; r < 6; ++r) {
                CHECK((rows_equal(fused.q, r, hat.q, r) || rows_equal(fused.q, r, target.q, r)));
                CHECK((rows_equal(fused.k, r, hat.k, r) || rows_equal(fused.k, r, target.k, r)));
                CHECK((rows_equal(fused.v, r, hat.v, r) || rows_equal(fused.v, r, target.v, r)));
            }
        }
    }
}

TEST_CASE("structure and content fusion agree on edit rows at active steps") {
    Prng prng(15);
    for (int rep = 0; rep < 100; ++rep) {
        const QkvTriple source = random_triple(prng, 6, 3, 2);
        const QkvTriple target = random_triple(prng, 6, 3, 2);
        const EditMask mask = random_mask(prng, 4);
        const int t = 7;  // active for alpha >= 0.3 with T = 8
        const FusionContext ctx = make_ctx(t, 8, 0.5, mask, source);
        const QkvTriple a = fuse_structure(ctx, target);
        const QkvTriple b = fuse_consistedit(ctx, target);
        for (size_t j = 0; j < 4; ++j) {
            if (!mask.binary[j]) continue;
            CHECK(rows_equal(a.q, 2 + j, b.q, 2 + j));
            CHECK(rows_equal(a.k, 2 + j, b.k, 2 + j));
        }
    }
}

TEST_CASE("eq5 V rule ignores alpha") {
    Prng prng(16);
    const QkvTriple source = random_triple(prng, 6, 3, 2);
    const QkvTriple target = random_triple(prng, 6, 3, 2);
    const EditMask mask = random_mask(prng, 4);
    Tensor first_v;
    bool first = true;
    for (double alpha : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        const FusionContext ctx = make_ctx(5, 8, alpha, mask, source);
        const QkvTriple fused = fuse_consistedit(ctx, target);
        if (first) {
            first_v = fused.v;
            first = false;
        } else {
            CHECK(fused.v.bitwise_equal(first_v));
        }
    }
}

TEST_CASE("baseline_kv all-ones masks reduce to plain attention on swapped KV") {
    Prng prng(17);
    const QkvTriple source = random_triple(prng, 5, 4, 2);
    const QkvTriple target = random_triple(prng, 5, 4, 2);
    FusionContext ctx;
    ctx.source = &source;
    const std::vector<uint8_t> ones(3, 1);
    const Tensor out = baseline_kv(ctx, target, ones, ones, 2);

    QkvTriple swapped;
    swapped.q = target.q;
    swapped.k = source.k;
    swapped.v = source.v;
    swapped.split = 2;
    CHECK(out.bitwise_equal(multi_head_attention(swapped, 2)));
}

TEST_CASE("baseline_kv zero attention mask yields the background branch") {
    Prng prng(18);
    const QkvTriple source = random_triple(prng, 5, 4, 2);
    const QkvTriple target = random_triple(prng, 5, 4, 2);
    FusionContext ctx;
    ctx.source = &source;
    const std::vector<uint8_t> ones(3, 1);
    const std::vector<uint8_t> zeros(3, 0);
    const Tensor out = baseline_kv(ctx, target, ones, zeros, 2);

    QkvTriple swapped;
    swapped.q = target.q;
    swapped.k = source.k;
    swapped.v = source.v;
    swapped.split = 2;
    // The complement of an all-ones conditioning mask leaves only text keys.
    const std::vector<uint8_t> none(3, 0);
    const Tensor f_b = multi_head_attention(swapped, 2, &none);
    for (size_t r = 2; r < 5; ++r) CHECK(rows_equal(out, r, f_b, r));
}

TEST_CASE("baseline_kv matches a scalar masked-attention oracle") {
    Prng prng(19);
    for (int rep = 0; rep < 50; ++rep) {
        const int split = 1;
        const QkvTriple source = random_triple(prng, 3, 4, split);
        const QkvTriple target = random_triple(prng, 3, 4, split);
        std::vector<uint8_t> m_c(2), m_attn(2);
        for (auto& b : m_c) b = prng.next() & 1;
        for (auto& b : m_attn) b = prng.next() & 1;

        FusionContext ctx;
        ctx.source = &source;
        const Tensor out = baseline_kv(ctx, target, m_c, m_attn, 1);

        // Scalar branch oracle in double.
        auto branch = [&](const std::vector<uint8_t>& gate, size_t qrow, size_t col) {
            double logits[3], mx = -1e300;
            bool ok[3];
            for (size_t j = 0; j < 3; ++j) {
                ok[j] = j < size_t(split) ? true : gate[j - size_t(split)] != 0;
                if (!ok[j]) continue;
                double acc = 0.0;
                for (size_t c = 0; c < 4; ++c) {
                    acc += double(target.q.at(qrow, c)) * double(source.k.at(j, c));
                }
                logits[j] = acc / std::sqrt(4.0);
                mx = std::max(mx, logits[j]);
            }
            double w[3] = {0, 0, 0}, sum = 0.0;
            for (size_t j = 0; j < 3; ++j) {
                if (!ok[j]) continue;
                w[j] = std::exp(logits[j] - mx);
                sum += w[j];
            }
            double acc = 0.0;
            for (size_t j = 0; j < 3; ++j) {
                if (ok[j]) acc += w[j] / sum * double(source.v.at(j, col));
            }
            return acc;
        };
        std::vector<uint8_t> inv(2);
        for (size_t j = 0; j < 2; ++j) inv[j] = m_c[j] ? 0 : 1;
        for (size_t r = 0; r < 3; ++r) {
            const bool edit_branch = r < size_t(split) || m_attn[r - size_t(split)];
            for (size_t c = 0; c < 4; ++c) {
                const double want = branch(edit_branch ? m_c : inv, r, c);
                CHECK(std::abs(double(out.at(r, c)) - want) < 1e-6);
            }
        }
    }
}

TEST_CASE("hard_blend selects by mask") {
    const Tensor a = Tensor::filled({4, 4, 3}, 0.25f);
    const Tensor b = Tensor::filled({4, 4, 3}, 0.75f);
    Tensor mask(4, 4);
    CHECK(hard_blend(a, b, mask).bitwise_equal(a));
    for (size_t i = 0; i < mask.size(); ++i) mask[i] = 1.0f;
    CHECK(hard_blend(a, b, mask).bitwise_equal(b));

    for (size_t y = 0; y < 4; ++y) {
        for (size_t x = 0; x < 4; ++x) mask.at(y, x) = float((y + x) % 2);
    }
    const Tensor blended = hard_blend(a, b, mask);
    for (size_t y = 0; y < 4; ++y) {
        for (size_t x = 0; x < 4; ++x) {
            const float want = (y + x) % 2 ? 0.75f : 0.25f;
            for (size_t c = 0; c < 3; ++c) CHECK(blended.at(y, x, c) == want);
        }
    }
    CHECK_THROWS_AS(hard_blend(a, Tensor({2, 2, 3}), mask), ShapeError);
}

TEST_CASE("control mode strings round trip") {
    for (ControlMode m : {ControlMode::None, ControlMode::BaselineKV, ControlMode::StructureFusion,
                          ControlMode::ConsistEdit, ControlMode::ConsistEditStar}) {
        CHECK(control_mode_from_string(control_mode_to_string(m)) == m);
    }
    CHECK_THROWS_AS(control_mode_from_string("bogus"), ConfigError);
}

TEST_CASE("block subset parsing") {
    CHECK(parse_block_subset("all", 4).empty());
    CHECK(parse_block_subset("last-half", 4) == std::vector<int>{2, 3});
    CHECK(parse_block_subset("0,2", 4) == std::vector<int>{0, 2});
    CHECK_THROWS_AS(parse_block_subset("0,x", 4), ConfigError);
    ControlConfig cc;
    cc.block_subset = {5};
    CHECK_THROWS_AS(cc.validate(4), ConfigError);
}

TEST_CASE("fusion context validation") {
    Prng prng(20);
    const QkvTriple source = random_triple(prng, 4, 3, 2);
    const QkvTriple target = random_triple(prng, 4, 3, 2);
    const EditMask mask = EditMask::all_ones(2);
    FusionContext ctx = make_ctx(1, 4, 1.5, mask, source);
    CHECK_THROWS_AS(fuse_structure(ctx, target), ConfigError);
    ctx = make_ctx(0, 4, 0.5, mask, source);
    CHECK_THROWS_AS(fuse_consistedit(ctx, target), ContractError);
    const EditMask wrong = EditMask::all_ones(3);
    ctx = make_ctx(1, 4, 0.5, wrong, source);
    CHECK_THROWS_AS(fuse_consistedit(ctx, target), ShapeError);
}
