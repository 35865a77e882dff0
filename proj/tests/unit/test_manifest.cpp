#include "dvne/errors.hpp"
#include "dvne/manifest.hpp"

#include <gtest/gtest.h>

#include <fstream>

namespace dvne {
namespace {

namespace fs = std::filesystem;

void put(const fs::path& p, const std::string& s) {
    fs::create_directories(p.parent_path());
    std::ofstream(p, std::ios::binary) << s;
}

// Expected values below come from git itself (hash-object, write-tree).
TEST(GitHash, BlobMatchesGit) {
    EXPECT_EQ(git_blob_hash("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
    EXPECT_EQ(git_blob_hash(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}

TEST(GitHash, TreeMatchesGit) {
    const fs::path d = fs::temp_directory_path() / "dvne_tree";
    fs::remove_all(d);
    put(d / "a.txt", "hello\n");
    put(d / "sub" / "b.txt", "x");
    put(d / "a" / "c", "y");
    EXPECT_EQ(git_object_hash(d), "4788672d957366e616805da9bad27526039599ea");
    EXPECT_EQ(git_object_hash(d / "a.txt"), "ce013625030ba8dba906f756967f9e9ca394464a");
    put(d / "sub" / "b.txt", "z");
    EXPECT_NE(git_object_hash(d), "4788672d957366e616805da9bad27526039599ea");
    EXPECT_THROW(git_object_hash(d / "missing"), IngestionError);
}

TEST(Manifest, RoundTripsAndIsWriteOnce) {
    const fs::path d = fs::temp_directory_path() / "dvne_manifest";
    fs::remove_all(d);
    put(d / "in" / "frame.txt", "abc");
    RunManifest m;
    m.tool_version = "1.2.3";
    m.command = "reconstruct";
    m.seed = 18446744073709551615ull;
    m.config = serialize_config(RunConfig{});
    m.arguments["preset"] = "short";
    m.inputs.push_back({"data", (d / "in").string(), ""});
    hash_inputs(m);
    EXPECT_EQ(m.inputs[0].hash, git_object_hash(d / "in"));
    EXPECT_EQ(m.input_hash.size(), 40u);
    const fs::path p = d / "manifest.json";
    write_manifest(p, m);
    const RunManifest back = read_manifest(p);
    EXPECT_EQ(back.seed, m.seed);
    EXPECT_EQ(back.config, m.config);
    EXPECT_EQ(back.inputs, m.inputs);
    EXPECT_EQ(back.input_hash, m.input_hash);
    EXPECT_EQ(back.arguments, m.arguments);
    EXPECT_EQ(parse_config(back.config), RunConfig{});
    EXPECT_THROW(write_manifest(p, m), IoError);
    write_timing(p, {{"stage", 1.5}});
    EXPECT_TRUE(fs::exists(d / "manifest.timing.json"));
    put(d / "bad.json", "{\"schema\": \"other\"}");
    EXPECT_THROW(read_manifest(d / "bad.json"), IngestionError);
}

}  // namespace
}  // namespace dvne
