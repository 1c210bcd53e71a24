#ifndef TAL_HTTP_HPP
#define TAL_HTTP_HPP

#include <string>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "service.hpp"

/**
 * @file http.hpp
 *
 * @brief JSON-over-HTTP binding of AnnotationService.
 *
 *   POST /sessions                  create from a SessionConfig body
 *   GET  /sessions/{id}/pending     unanswered queries of the current batch
 *   POST /sessions/{id}/answers     {"query_id": "...", "ordering": "j" | "k"}
 *   GET  /sessions/{id}/status      round, labeled count, status, latest TGA
 */

namespace tal {

namespace detail {

inline void reply(httplib::Response& res, int code, const nlohmann::json& body) {
    res.status = code;
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_content(body.dump(), "application/json; charset=utf-8");
}

inline void reply_error(httplib::Response& res, int code, const std::string& message) {
    reply(res, code, {{"error", message}});
}

template <typename Fn>
void guarded(httplib::Response& res, Fn&& fn) {
    try {
        fn();
    } catch (const NotFound& e) {
        reply_error(res, 404, e.what());
    } catch (const Conflict& e) {
        reply_error(res, 409, e.what());
    } catch (const ConfigError& e) {
        reply_error(res, 400, e.what());
    } catch (const nlohmann::json::exception& e) {
        reply_error(res, 400, e.what());
    } catch (const std::exception& e) {
        reply_error(res, 500, e.what());
    }
}

}  // namespace detail

inline void mount(httplib::Server& server, AnnotationService& service) {
    server.Post("/sessions", [&service](const httplib::Request& req, httplib::Response& res) {
        detail::guarded(res, [&] {
            const auto body = req.body.empty() ? nlohmann::json::object() : nlohmann::json::parse(req.body);
            auto& s = service.create(session_config_from_json(body));
            detail::reply(res, 201, status_json(s.snapshot()));
        });
    });
    server.Get(R"(/sessions/([A-Za-z0-9_-]+)/pending)", [&service](const httplib::Request& req, httplib::Response& res) {
        detail::guarded(res, [&] { detail::reply(res, 200, pending_json(service.get(req.matches[1]))); });
    });
    server.Get(R"(/sessions/([A-Za-z0-9_-]+)/status)", [&service](const httplib::Request& req, httplib::Response& res) {
        detail::guarded(res, [&] { detail::reply(res, 200, status_json(service.get(req.matches[1]).snapshot())); });
    });
    server.Post(R"(/sessions/([A-Za-z0-9_-]+)/answers)", [&service](const httplib::Request& req, httplib::Response& res) {
        detail::guarded(res, [&] {
            auto& s = service.get(req.matches[1]);
            const auto body = nlohmann::json::parse(req.body);
            const auto qid = body.at("query_id").get<std::string>();
            const auto token = body.at("ordering").get<std::string>();
            if (token != "j" && token != "k") throw ConfigError("ordering must be \"j\" or \"k\"");
            const auto remaining = s.answer(qid, token == "j" ? Ordering::j_closer : Ordering::k_closer);
            detail::reply(res, 200, {{"query_id", qid}, {"remaining", remaining}, {"status", to_string(s.snapshot().status)}});
        });
    });
    server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
        res.set_header("Access-Control-Allow-Origin", "*");
        res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
        res.set_header("Access-Control-Allow-Headers", "Content-Type");
        res.status = 204;
    });
}

}  // namespace tal

#endif
