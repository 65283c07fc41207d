import { InpaintRequest, InpaintResponse, ModelEntry } from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
    public field?: string,
  ) {
    super(message);
  }
}

export class ApiClient {
  constructor(private baseUrl: string) {}

  async health(): Promise<{ status: string; bases: string[]; branches: string[] }> {
    const res = await fetch(`${this.baseUrl}/health`);
    if (!res.ok) throw new ApiError(res.status, `health check failed (${res.status})`);
    return res.json();
  }

  async models(): Promise<ModelEntry[]> {
    const res = await fetch(`${this.baseUrl}/models`);
    if (!res.ok) throw new ApiError(res.status, `model list failed (${res.status})`);
    return (await res.json()).models;
  }

  async inpaint(req: InpaintRequest): Promise<InpaintResponse> {
    const res = await fetch(`${this.baseUrl}/inpaint`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(req),
    });
    const body = await res.json().catch(() => ({}));
    if (!res.ok) {
      throw new ApiError(
        res.status,
        body.error ?? `inpaint failed (${res.status})`,
        body.field,
      );
    }
    return body as InpaintResponse;
  }
}
