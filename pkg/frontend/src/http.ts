/** HTTP transport for the render service. */

import { Poster } from "./renderClient.js";
import { ServiceInfo } from "./state.js";

export class ServiceError extends Error {
  constructor(
    message: string,
    readonly status: number,
  ) {
    super(message);
    this.name = "ServiceError";
  }
}

async function errorMessage(res: Response): Promise<string> {
  try {
    const body = await res.json();
    if (body && typeof body.error === "string") return body.error;
  } catch {
    // non-JSON error body; fall through to the status line
  }
  return `render service returned ${res.status}`;
}

export function httpPoster(base = ""): Poster {
  return async (body) => {
    const res = await fetch(`${base}/render`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!res.ok) {
      throw new ServiceError(await errorMessage(res), res.status);
    }
    return { blob: await res.blob() };
  };
}

export async function fetchInfo(base = ""): Promise<ServiceInfo> {
  const res = await fetch(`${base}/info`);
  if (!res.ok) {
    throw new ServiceError(await errorMessage(res), res.status);
  }
  return (await res.json()) as ServiceInfo;
}
