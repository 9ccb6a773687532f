import { mountApp } from "./app.js";

const base = new URLSearchParams(window.location.search).get("service") ?? "";
const root = document.getElementById("app");
if (root) {
  void mountApp(root, base);
}
