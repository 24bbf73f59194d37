#pragma once

// External-judge plumbing: running a judge command over a rendered prompt, and
// a deterministic stub judge that re-derives the step-reward annotation from
// the prompt text alone (used as a stand-in for a real external judge).

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unistd.h>
#include <utility>
#include <vector>

#include "steptool/errors.hpp"
#include "json.hpp"

namespace steptool {

namespace detail {

inline std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> out;
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

}  // namespace detail

// Re-derives the annotation purely from the rendered prompt: item names start
// with 'i', so tool-call success, contribution and the final status can all be
// reconstructed from the query/step/answer sections. Returns the response JSON
// an external judge would send back.
inline std::string stub_judge(const std::string& prompt) {
  std::istringstream in(prompt);
  std::string line;
  std::vector<std::string> query_items;
  std::vector<std::pair<std::vector<std::string>, std::string>> steps;  // action words, response
  std::vector<std::string> final_answer;

  enum Section { None, Query, Steps, Final } section = None;
  while (std::getline(in, line)) {
    if (line.rfind("Query:", 0) == 0) {
      section = Query;
      continue;
    }
    if (line.rfind("Intermediate Steps:", 0) == 0) {
      section = Steps;
      continue;
    }
    if (line.rfind("Final Answer:", 0) == 0) {
      section = Final;
      continue;
    }
    if (line.rfind("Given the above query", 0) == 0) break;
    if (section == Query) {
      for (const std::string& w : detail::split_ws(line)) query_items.push_back(w);
    } else if (section == Steps) {
      if (line.rfind("Step ", 0) == 0) {
        const size_t colon = line.find(": ");
        steps.push_back({detail::split_ws(line.substr(colon + 2)), ""});
      } else if (line.rfind("Response: ", 0) == 0 && !steps.empty()) {
        auto words = detail::split_ws(line.substr(10));
        steps.back().second = words.empty() ? "" : words[0];
      }
    } else if (section == Final) {
      for (const std::string& w : detail::split_ws(line)) final_answer.push_back(w);
    }
  }

  auto is_item = [](const std::string& w) { return !w.empty() && w[0] == 'i'; };
  auto in_query = [&](const std::string& w) {
    return std::find(query_items.begin(), query_items.end(), w) != query_items.end();
  };

  nlohmann::json sc = nlohmann::json::array();
  nlohmann::json con = nlohmann::json::array();
  std::vector<std::string> gathered;
  for (const auto& [action, response] : steps) {
    const bool yielded = is_item(response);
    sc.push_back(yielded ? 1 : 0);
    if (!yielded) {
      con.push_back(0);
    } else {
      const bool novel =
          std::find(gathered.begin(), gathered.end(), response) == gathered.end();
      con.push_back(in_query(response) && novel ? 5 : 2);
      if (novel) gathered.push_back(response);
    }
  }

  int n_ref = 0;
  for (const std::string& q : query_items)
    if (std::find(final_answer.begin(), final_answer.end(), q) != final_answer.end()) ++n_ref;
  const int n = static_cast<int>(query_items.size());
  std::string status = "Unsolved";
  if (n_ref == n && n > 0) {
    status = "Solved";
    for (const std::string& q : query_items)
      if (std::find(gathered.begin(), gathered.end(), q) == gathered.end()) status = "Unsure";
  } else if (n_ref > 0 && 2 * n_ref >= n) {
    status = "Unsure";
  }

  nlohmann::json out;
  out["succeed_tool_calling"] = sc;
  out["contribution_to_final_answer"] = con;
  out["final_answer_status"] = status;
  return out.dump();
}

// Runs `cmd` with the prompt on stdin and captures its stdout.
inline std::string run_judge_command(const std::string& cmd, const std::string& prompt) {
  namespace fs = std::filesystem;
  fs::path tmp = fs::temp_directory_path() /
                 ("steptool_prompt_" + std::to_string(::getpid()) + ".txt");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write prompt file: " + tmp.string());
    out << prompt;
  }
  std::string full = cmd + " < " + tmp.string();
  FILE* pipe = ::popen(full.c_str(), "r");
  if (!pipe) {
    fs::remove(tmp);
    throw IoError("failed to start judge command: " + cmd);
  }
  std::string out;
  char buf[4096];
  size_t n;
  while ((n = ::fread(buf, 1, sizeof buf, pipe)) > 0) out.append(buf, n);
  int rc = ::pclose(pipe);
  fs::remove(tmp);
  if (rc != 0) throw IoError("judge command failed with status " + std::to_string(rc));
  return out;
}

}  // namespace steptool
