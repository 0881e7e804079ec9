#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "e2efs/e2efs.hpp"

using namespace e2efs;

TEST_CASE("model file round trip is bit-exact") {
    const auto spec = make_msc_spec(12, 2, 6, 1, 1, 8, 10);
    ModelRecord rec;
    rec.spec = spec;
    rec.params = init(spec, 424242);
    rec.loss = LossSpec{LossKind::cross_entropy};
    rec.mask = make_mask({0, 3, 7, 11}, MaskOrigin::loss_grad, 12);

    const std::string path = "test_model_roundtrip.e2efs";
    save_model(path, rec);
    const auto back = load_model(path);
    REQUIRE(spec_to_string(back.spec) == spec_to_string(rec.spec));
    REQUIRE(back.params.seed == rec.params.seed);
    REQUIRE(loss_id(back.loss) == loss_id(rec.loss));
    REQUIRE(back.mask->indices == rec.mask->indices);
    REQUIRE(back.mask->origin == MaskOrigin::loss_grad);
    REQUIRE(back.params.values.size() == rec.params.values.size());
    for (std::size_t i = 0; i < rec.params.values.size(); ++i) {
        std::uint64_t a, b;
        std::memcpy(&a, &rec.params.values[i], 8);
        std::memcpy(&b, &back.params.values[i], 8);
        REQUIRE(a == b);
    }

    // saving the load gives identical bytes on disk
    const std::string path2 = "test_model_roundtrip2.e2efs";
    save_model(path2, back);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::vector<char> b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::vector<char> b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    REQUIRE(b1 == b2);
    std::remove(path.c_str());
    std::remove(path2.c_str());
}

TEST_CASE("model file starts with magic and version") {
    const auto spec = make_msc_spec(4, 2, 3, 1, 1, 4, 4);
    ModelRecord rec{spec, init(spec, 7), LossSpec{LossKind::cross_entropy}, std::nullopt};
    const std::string path = "test_model_magic.e2efs";
    save_model(path, rec);
    std::ifstream in(path, std::ios::binary);
    char head[6];
    REQUIRE(in.read(head, 6));
    REQUIRE(std::string(head, 5) == "E2EFS");
    REQUIRE(head[5] == 0x01);
    std::remove(path.c_str());
}

TEST_CASE("model loader rejects damage") {
    const auto spec = make_msc_spec(4, 2, 3, 1, 1, 4, 4);
    ModelRecord rec{spec, init(spec, 7), LossSpec{LossKind::cross_entropy}, std::nullopt};
    const std::string path = "test_model_damage.e2efs";
    save_model(path, rec);

    // truncate the parameter block
    {
        std::ifstream in(path, std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        std::ofstream out(path, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 4));
    }
    REQUIRE_THROWS_AS(load_model(path), DataError);

    {
        std::ofstream out(path, std::ios::binary);
        out << "WRONG!";
    }
    REQUIRE_THROWS_AS(load_model(path), DataError);
    std::remove(path.c_str());

    REQUIRE_THROWS_AS(load_model("does_not_exist.e2efs"), DataError);
}

TEST_CASE("parameter count mismatches are rejected at save") {
    const auto spec = make_msc_spec(4, 2, 3, 1, 1, 4, 4);
    ModelRecord rec{spec, init(spec, 7), LossSpec{LossKind::cross_entropy}, std::nullopt};
    rec.params.values.pop_back();
    REQUIRE_THROWS_AS(save_model("never.e2efs", rec), DataError);
}
