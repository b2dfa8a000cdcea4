/** Typed client for the session service. Every state change round-trips
 *  to the server; the UI never computes masks or metrics itself. */

export interface StatePayload {
  session_id: string;
  iteration: number;
  iterations: number[];
  mask_area_history: number[];
  brain_area: number;
  tau: number;
  status: string;
  termination_reason: string | null;
  mask_png: string;
  error_png: string;
  reconstruction_png: string;
  image_png: string;
  overlay_png: string;
  segmentation_area: number;
}

export interface SessionSummary {
  session_id: string;
  model_id: string;
  status: string;
  termination_reason: string | null;
  tau: number;
  iterations: number[];
  mask_area_history: number[];
  accepted: AcceptedInfo | null;
}

export interface AcceptedInfo {
  iteration: number;
  tau: number;
  segmentation_area: number;
  files: string[];
}

export interface ArraysPayload {
  iteration: number;
  kind: string;
  values: number[][];
}

export interface CreateSessionOptions {
  modelId: string;
  phantom?: Record<string, unknown>;
  pixels?: number[][];
  brainMask?: number[][];
  tau?: number;
  percentile?: number;
  seed?: number;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public category: string,
    message: string,
  ) {
    super(message);
  }
}

async function parseError(response: Response): Promise<never> {
  let category = "unknown";
  let detail = response.statusText;
  try {
    const body = await response.json();
    category = body.error ?? category;
    detail = body.detail ?? JSON.stringify(body);
  } catch {
    /* non-JSON error body */
  }
  throw new ApiError(response.status, category, detail);
}

export class SessionClient {
  constructor(private baseUrl: string) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await fetch(`${this.baseUrl}${path}`, {
      headers: { "Content-Type": "application/json" },
      ...init,
    });
    if (!response.ok) await parseError(response);
    return (await response.json()) as T;
  }

  async createSession(options: CreateSessionOptions): Promise<{ session_id: string; state: StatePayload }> {
    return this.request("/api/v1/sessions", {
      method: "POST",
      body: JSON.stringify({
        model_id: options.modelId,
        phantom: options.phantom ?? null,
        pixels: options.pixels ?? null,
        brain_mask: options.brainMask ?? null,
        tau: options.tau ?? null,
        percentile: options.percentile ?? null,
        seed: options.seed ?? 0,
      }),
    });
  }

  async models(): Promise<string[]> {
    const body = await this.request<{ models: string[] }>("/api/v1/models");
    return body.models;
  }

  async summary(sessionId: string): Promise<SessionSummary> {
    return this.request(`/api/v1/sessions/${sessionId}`);
  }

  async state(sessionId: string, iteration?: number): Promise<StatePayload> {
    const query = iteration === undefined ? "" : `?iteration=${iteration}`;
    return this.request(`/api/v1/sessions/${sessionId}/state${query}`);
  }

  async arrays(sessionId: string, kind: string, iteration?: number): Promise<ArraysPayload> {
    const params = new URLSearchParams({ kind });
    if (iteration !== undefined) params.set("iteration", String(iteration));
    return this.request(`/api/v1/sessions/${sessionId}/arrays?${params}`);
  }

  async setTau(sessionId: string, tau: number): Promise<{ tau: number }> {
    return this.request(`/api/v1/sessions/${sessionId}/tau`, {
      method: "POST",
      body: JSON.stringify({ tau }),
    });
  }

  async step(sessionId: string, n = 1): Promise<StatePayload> {
    return this.request(`/api/v1/sessions/${sessionId}/step`, {
      method: "POST",
      body: JSON.stringify({ n }),
    });
  }

  async rollback(sessionId: string, iteration: number): Promise<StatePayload> {
    return this.request(`/api/v1/sessions/${sessionId}/rollback`, {
      method: "POST",
      body: JSON.stringify({ iteration }),
    });
  }

  async accept(sessionId: string, iteration?: number, tau?: number): Promise<{ accepted: AcceptedInfo }> {
    return this.request(`/api/v1/sessions/${sessionId}/accept`, {
      method: "POST",
      body: JSON.stringify({ iteration: iteration ?? null, tau: tau ?? null }),
    });
  }

  async exportFile(sessionId: string, filename: string): Promise<ArrayBuffer> {
    const response = await fetch(`${this.baseUrl}/api/v1/sessions/${sessionId}/export/${filename}`);
    if (!response.ok) await parseError(response);
    return response.arrayBuffer();
  }
}
