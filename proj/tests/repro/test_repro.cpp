#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string capture(const std::string& command) {
  std::string out;
  FILE* pipe = ::popen(command.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[256];
  while (std::fgets(buf, sizeof buf, pipe)) out += buf;
  CHECK(::pclose(pipe) == 0);
  return out;
}

}  // namespace

TEST_CASE("every acceptance criterion has exactly one repro script") {
  const fs::path repro = fs::path(DYNQ_SOURCE_DIR) / "repro";
  const json manifest = json::parse(slurp(repro / "criteria.json"));

  std::set<int> listed;
  std::istringstream lines(capture(std::string("\"") + DYNQ_ACCEPTANCE + "\" --list"));
  for (std::string line; std::getline(lines, line);) listed.insert(std::stoi(line));
  REQUIRE(listed.size() == 10);

  std::set<int> mapped;
  std::set<std::string> scripts;
  for (const auto& c : manifest.at("criteria")) {
    const int id = c.at("id");
    CHECK_MESSAGE(mapped.insert(id).second, "criterion " << id << " mapped twice");
    const std::string script = c.at("script");
    CHECK(scripts.insert(script).second);
    const fs::path path = repro / script;
    REQUIRE_MESSAGE(fs::is_regular_file(path), path);
    CHECK((fs::status(path).permissions() & fs::perms::owner_exec) != fs::perms::none);
    const std::string body = slurp(path);
    CHECK(body.rfind("#!/bin/sh", 0) == 0);
    CHECK(body.find("--only " + std::to_string(id) + " ") != std::string::npos);
  }
  CHECK(mapped == listed);

  std::set<std::string> on_disk;
  for (const auto& e : fs::directory_iterator(repro)) {
    const std::string name = e.path().filename().string();
    if (name.rfind("criterion_", 0) == 0) on_disk.insert(name);
  }
  CHECK(on_disk == scripts);
  CHECK(fs::is_regular_file(repro / "run_all.sh"));
}
