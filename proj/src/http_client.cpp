// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>

#include <httplib.h>

#include "idea/captions.hpp"

namespace idea {

HttpClientConfig HttpClientConfig::from_environment(std::string endpoint) {
    HttpClientConfig cfg;
    cfg.endpoint = std::move(endpoint);
    if (const char* key = std::getenv("IDEA_MLLM_KEY")) cfg.credential = key;
    return cfg;
}

HttpMllmClient::HttpMllmClient(HttpClientConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.endpoint.rfind("http://", 0) != 0)
        throw ConfigError("MLLM endpoint must be an http:// URL, got '" + cfg_.endpoint + "'");
}

std::string HttpMllmClient::send(const std::string& prompt, const ImageRef& image) {
    const auto slash = cfg_.endpoint.find('/', std::string("http://").size());
    const std::string host = slash == std::string::npos ? cfg_.endpoint : cfg_.endpoint.substr(0, slash);
    const std::string path = slash == std::string::npos ? "/" : cfg_.endpoint.substr(slash);

    httplib::Client cli(host);
    cli.set_connection_timeout(cfg_.timeout);
    cli.set_read_timeout(cfg_.timeout);
    httplib::Headers headers;
    if (!cfg_.credential.empty()) headers.emplace("Authorization", "Bearer " + cfg_.credential);

    const nlohmann::json body{{"prompt", prompt}, {"image", image.uri}};
    auto res = cli.Post(path, headers, body.dump(), "application/json");
    if (!res) throw ClientError("MLLM request to " + cfg_.endpoint + " failed: " + httplib::to_string(res.error()));
    if (res->status != 200) throw ClientError("MLLM endpoint returned HTTP " + std::to_string(res->status));
    try {
        return nlohmann::json::parse(res->body).at("text").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw ClientError(std::string("malformed MLLM response: ") + e.what());
    }
}

}  // namespace idea
