#include <doctest.h>

#include "bdlab/container.hpp"
#include "bdlab/datasets.hpp"
#include "bdlab/errors.hpp"
#include "support.hpp"

#include <cmath>
#include <set>

using namespace bdlab;

TEST_SUITE("container") {

TEST_CASE("encode, decode, encode is byte-identical") {
    Rng rng(1);
    Container c;
    c.metadata = R"({"kind":"test","note":"é"})";
    c.tensors.push_back(NamedTensor::from("w", test::random_tensor(rng, {3, 2, 2})));
    c.tensors.push_back(NamedTensor::from("b", test::random_tensor(rng, {5})));
    c.tensors.push_back({"odd", {1}, {-0.0f}});
    const auto bytes = encode_container(c);
    REQUIRE(std::string(bytes.begin(), bytes.begin() + 4) == "BDLB");
    const Container back = decode_container(bytes);
    CHECK(back.metadata == c.metadata);
    CHECK(back.tensors.size() == 3);
    CHECK(encode_container(back) == bytes);
    CHECK(std::signbit(back.at("odd").values[0]));
}

TEST_CASE("file round trip is byte-identical") {
    test::TempDir dir("container");
    Container c;
    c.metadata = "{}";
    c.tensors.push_back({"t", {2, 2}, {1.f, 2.f, 3.f, 4.f}});
    write_container(c, dir.path() / "a.bdlb");
    write_container(read_container(dir.path() / "a.bdlb"), dir.path() / "b.bdlb");
    CHECK(read_file_bytes(dir.path() / "a.bdlb") == read_file_bytes(dir.path() / "b.bdlb"));
}

TEST_CASE("every truncation is a format error with an offset inside the buffer") {
    Container c;
    c.metadata = R"({"a":1})";
    c.tensors.push_back({"t", {2, 3}, {1, 2, 3, 4, 5, 6}});
    const auto bytes = encode_container(c);
    for (std::size_t n = 0; n < bytes.size(); ++n) {
        try {
            (void)decode_container(std::span<const std::uint8_t>(bytes.data(), n));
            FAIL("decoded a truncated container of " << n << " bytes");
        } catch (const FormatError& e) {
            CHECK(e.offset() <= n);
        }
    }
}

TEST_CASE("bad magic and trailing bytes are rejected") {
    Container c;
    c.tensors.push_back({"t", {1}, {1}});
    auto bytes = encode_container(c);
    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_container(bad), FormatError);
    bytes.push_back(0);
    CHECK_THROWS_AS(decode_container(bytes), FormatError);
}

TEST_CASE("missing tensor lookup throws") {
    Container c;
    CHECK(c.find("nope") == nullptr);
    CHECK_THROWS_AS(c.at("nope"), FormatError);
}

TEST_CASE("fnv1a64 reference values") {
    CHECK(fnv1a64(std::string()) == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64(std::string("a")) == 0xaf63dc4c8601ec8cULL);
    CHECK(hex64(0xabcULL) == "0000000000000abc");
}

} // TEST_SUITE

TEST_SUITE("datasets") {

TEST_CASE("IDX save and load round-trip at 8-bit resolution") {
    test::TempDir dir("idx");
    Dataset d = synth_strokes(37, 10, 5, {.side = 12});
    save_idx(d, dir.path() / "img", dir.path() / "lab");
    const Dataset back = load_idx(dir.path() / "img", dir.path() / "lab", 10);
    REQUIRE(back.size() == d.size());
    CHECK(back.height == 12);
    CHECK(back.labels == d.labels);
    for (std::size_t i = 0; i < d.pixels.size(); ++i) {
        CHECK(back.pixels[i] == doctest::Approx(std::round(255.0 * d.pixels[i]) / 255.0).epsilon(1e-6));
    }
}

TEST_CASE("IDX loader rejects wrong magic and truncation") {
    test::TempDir dir("idxbad");
    Dataset d = synth_binary(4, 1);
    save_idx(d, dir.path() / "img", dir.path() / "lab");
    CHECK_THROWS(load_idx(dir.path() / "lab", dir.path() / "img"));
    auto bytes = read_file_bytes(dir.path() / "img");
    bytes.resize(bytes.size() - 3);
    write_file_bytes(dir.path() / "short", bytes);
    CHECK_THROWS(load_idx(dir.path() / "short", dir.path() / "lab"));
    CHECK_THROWS_AS(load_idx(dir.path() / "absent", dir.path() / "lab"), IoError);
}

TEST_CASE("downsample equals the block mean") {
    const Dataset d = synth_strokes(5, 10, 3, {.side = 16});
    const Dataset s = downsample(d, 4);
    REQUIRE(s.height == 4);
    for (std::size_t n = 0; n < d.size(); ++n)
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t j = 0; j < 4; ++j) {
                double acc = 0.0;
                for (std::size_t a = 0; a < 4; ++a)
                    for (std::size_t b = 0; b < 4; ++b) acc += d.image(n)[(4 * i + a) * 16 + 4 * j + b];
                CHECK(s.image(n)[i * 4 + j] == doctest::Approx(acc / 16).epsilon(1e-6));
            }
    CHECK_THROWS_AS(downsample(d, 3), ConfigError);
}

TEST_CASE("synthetic data is seeded, labeled round-robin and in range") {
    const Dataset a = synth_strokes(50, 10, 7), b = synth_strokes(50, 10, 7), c = synth_strokes(50, 10, 8);
    CHECK(a.pixels == b.pixels);
    CHECK(a.pixels != c.pixels);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.labels[i] == static_cast<int>(i % 10));
    a.validate();
    CHECK(a.provenance == Provenance::synthetic);
}

TEST_CASE("train and test ids are disjoint") {
    const SplitPair sp = synth_strokes_split(200, 100, 10, 1);
    std::set<std::uint64_t> train(sp.train.source_index.begin(), sp.train.source_index.end());
    for (auto id : sp.test.source_index) CHECK(train.count(id) == 0);
    CHECK(sp.test.split == Split::test);
}

TEST_CASE("validate catches bad labels and pixels") {
    Dataset d = synth_binary(6, 2);
    d.labels[3] = 2;
    CHECK_THROWS_AS(d.validate(), ValidationError);
    d = synth_binary(6, 2);
    d.pixels[0] = 1.5f;
    CHECK_THROWS_AS(d.validate(), ValidationError);
}

TEST_CASE("dataset cache round-trips exactly") {
    test::TempDir dir("cache");
    const Dataset d = synth_strokes(20, 10, 4);
    save_dataset(d, dir.path() / "d.bdlb");
    const Dataset back = load_dataset(dir.path() / "d.bdlb");
    CHECK(back.pixels == d.pixels);
    CHECK(back.labels == d.labels);
    CHECK(back.source_index == d.source_index);
}

TEST_CASE("class index helpers partition the data") {
    const Dataset d = synth_strokes(30, 10, 1);
    const auto in = d.indices_of_class(3), out = d.indices_not_of_class(3);
    CHECK(in.size() == 3);
    CHECK(in.size() + out.size() == d.size());
    for (auto i : out) CHECK(d.labels[i] != 3);
}

} // TEST_SUITE
