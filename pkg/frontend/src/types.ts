// Payload types mirroring the review service's JSON (see /api endpoints).

/** [x, y, width, height] in image pixels. */
export type BoxTuple = [number, number, number, number];

export interface LabelJson {
  label_id: number;
  image_id: number;
  bbox: BoxTuple;
  source: "crowd" | "expert" | "model_p" | "model_a";
  category_id: number;
  confidence: number;
  note?: string;
}

export type Region = "red" | "green";

export type ItemStatus = "pending" | "accepted" | "edited" | "rejected" | "added_missing";

export interface ReviewItem {
  item_id: number;
  image_id: number;
  region: Region;
  flagged: LabelJson;
  suggestions: LabelJson[];
  status: ItemStatus;
  resolution: BoxTuple | null;
  reviewer: string | null;
  decided_at: string | null;
}

export interface QueuePage {
  items: ReviewItem[];
  total: number;
  offset: number;
  limit: number;
}

export interface OverlayRegions {
  gray: number[][];
  pink: number[];
  red: number[];
  green: number[];
  scores: Record<string, number>;
}

export interface Overlay {
  width: number;
  height: number;
  file_name: string;
  crowd: LabelJson[];
  model_p: LabelJson[];
  model_a: LabelJson[];
  regions: OverlayRegions;
}

export interface Progress {
  total: number;
  resolved: number;
  pending: number;
  by_status: Record<string, number>;
  cost_per_item: number;
  review_cost_spent: number;
  review_cost_remaining: number;
}

export type DecisionAction = "accept" | "edit" | "reject" | "add_missing";

export interface DecisionPayload {
  action: DecisionAction;
  box?: BoxTuple;
  suggestion_id?: number;
  reviewer?: string;
}
