// Thin fetch client for the review service.

import type { DecisionPayload, Overlay, Progress, QueuePage, ReviewItem } from "./types.js";

export interface QueueQuery {
  status?: string;
  image_id?: number;
  offset?: number;
  limit?: number;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    detail: string,
  ) {
    super(`${status}: ${detail}`);
  }
}

export class ReviewApi {
  constructor(
    private readonly baseUrl: string = "",
    private readonly token?: string,
  ) {}

  private headers(json: boolean): Record<string, string> {
    const out: Record<string, string> = {};
    if (json) out["Content-Type"] = "application/json";
    if (this.token) out["X-Review-Token"] = this.token;
    return out;
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await fetch(this.baseUrl + path, init);
    if (!response.ok) {
      let detail = response.statusText;
      try {
        detail = ((await response.json()) as { detail?: string }).detail ?? detail;
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(response.status, detail);
    }
    return (await response.json()) as T;
  }

  queue(query: QueueQuery = {}): Promise<QueuePage> {
    const params = new URLSearchParams();
    for (const [key, value] of Object.entries(query)) {
      if (value !== undefined) params.set(key, String(value));
    }
    const suffix = params.size > 0 ? `?${params.toString()}` : "";
    return this.request<QueuePage>(`/api/queue${suffix}`, { headers: this.headers(false) });
  }

  item(itemId: number): Promise<ReviewItem> {
    return this.request<ReviewItem>(`/api/items/${itemId}`, { headers: this.headers(false) });
  }

  overlay(imageId: number): Promise<Overlay> {
    return this.request<Overlay>(`/api/images/${imageId}/overlay`, {
      headers: this.headers(false),
    });
  }

  /** URL for the raw image; <img>/drawImage loads it directly. */
  imageUrl(imageId: number): string {
    return `${this.baseUrl}/api/images/${imageId}`;
  }

  decide(itemId: number, payload: DecisionPayload): Promise<ReviewItem> {
    return this.request<ReviewItem>(`/api/items/${itemId}/decision`, {
      method: "POST",
      headers: this.headers(true),
      body: JSON.stringify(payload),
    });
  }

  progress(): Promise<Progress> {
    return this.request<Progress>("/api/progress", { headers: this.headers(false) });
  }
}
