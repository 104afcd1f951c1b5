#pragma once

// HTTP/JSON routes over a SessionManager.

#include <string>

// Eigen must be seen before httplib: <resolv.h> defines a `_res` macro that
// collides with Eigen's product kernels.
#include "hdl/service.hpp"

#include <httplib.h>
#include <json.hpp>

namespace hdl {

namespace detail {

inline void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

inline nlohmann::json parse_body(const httplib::Request& req) {
    if (req.body.empty()) return nlohmann::json::object();
    try {
        auto j = nlohmann::json::parse(req.body);
        if (!j.is_object()) throw ApiError(400, "bad_request", "request body must be a JSON object");
        return j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ApiError(400, "bad_request", std::string("malformed JSON: ") + e.what());
    }
}

template <typename F>
httplib::Server::Handler guarded(F fn, int ok_status = 200) {
    return [fn, ok_status](const httplib::Request& req, httplib::Response& res) {
        try {
            send_json(res, ok_status, fn(req));
        } catch (const ApiError& e) {
            send_json(res, e.status, e.body());
        } catch (const std::exception& e) {
            send_json(res, 500, {{"code", "internal"}, {"message", e.what()}, {"phase", nullptr}});
        }
    };
}

}  // namespace detail

inline void install_routes(httplib::Server& server, SessionManager& sessions) {
    using detail::guarded;
    const std::string id = R"(/sessions/([A-Za-z0-9_-]+))";
    server.Get("/health", guarded([&](const httplib::Request&) {
        return nlohmann::json{{"status", "ok"}, {"weights_fingerprint", sessions.artifacts().weights_fingerprint}};
    }));
    server.Post("/sessions", guarded([&](const httplib::Request& req) { return sessions.create(detail::parse_body(req)); }, 201));
    server.Post(id + "/initialize", guarded([&](const httplib::Request& req) {
        return sessions.initialize(req.matches[1], detail::parse_body(req));
    }));
    server.Get(id + "/instructions", guarded([&](const httplib::Request& req) { return sessions.instructions(req.matches[1]); }));
    server.Post(id + "/move", guarded([&](const httplib::Request& req) {
        return sessions.move(req.matches[1], detail::parse_body(req));
    }));
    server.Post(id + "/capture", guarded([&](const httplib::Request& req) { return sessions.capture(req.matches[1]); }));
    server.Post(id + "/diagnose", guarded([&](const httplib::Request& req) { return sessions.diagnose(req.matches[1]); }));
    server.Get(id + "/log", guarded([&](const httplib::Request& req) { return sessions.log_of(req.matches[1]); }));
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) {
        res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
        res.set_header("Access-Control-Allow-Headers", "Content-Type");
        res.status = 204;
    });
    server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
        if (res.body.empty()) {
            detail::send_json(res, res.status, {{"code", "not_found"}, {"message", "no such endpoint"}, {"phase", nullptr}});
        }
    });
}

}  // namespace hdl
