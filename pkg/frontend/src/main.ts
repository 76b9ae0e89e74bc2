import { RatingApi } from "./api.js";
import { SessionController } from "./session.js";

function listenerToken(): string | null {
  const fromQuery = new URLSearchParams(window.location.search).get("token");
  if (fromQuery) return fromQuery;
  const hash = window.location.hash.replace(/^#/, "");
  return hash.length > 0 ? hash : null;
}

window.addEventListener("DOMContentLoaded", () => {
  const root = document.getElementById("app");
  if (root === null) return;
  const token = listenerToken();
  if (token === null) {
    root.textContent =
      "Missing listener token. Open the link you were given (it ends in ?token=...).";
    return;
  }
  const controller = new SessionController(new RatingApi(""), token, root);
  void controller.start();
});
