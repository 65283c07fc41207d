export interface InpaintRequest {
  image: string; // base64 PNG
  mask: string; // base64 single-channel PNG, 255 = hole
  prompt: string;
  w: number;
  blend_mode: BlendMode;
  blur_sigma: number;
  steps: number;
  guidance: number;
  seed: number;
  base_id?: string;
  branch_id?: string;
}

export interface InpaintResponse {
  image: string;
  timing_ms: number;
  options: {
    prompt: string;
    w: number;
    blend_mode: string;
    blur_sigma: number;
    steps: number;
    guidance: number;
    seed: number;
  };
  model_id: { base: string; branch: string };
}

export interface ModelEntry {
  id: string;
  role: "base" | "branch";
  axes?: Record<string, string>;
}

export type BlendMode = "none" | "paste" | "blur";

/** Everything the option panel controls; maps 1:1 onto request fields. */
export interface PanelState {
  prompt: string;
  w: number;
  blendMode: BlendMode;
  blurSigma: number;
  steps: number;
  guidance: number;
  seed: number;
  baseId?: string;
  branchId?: string;
}

export const DEFAULT_PANEL: PanelState = {
  prompt: "",
  w: 1.0,
  blendMode: "blur",
  blurSigma: 3.0,
  steps: 50,
  guidance: 7.5,
  seed: 0,
};

/** The preservation-scale slider sweeps this range. */
export const W_SLIDER_MIN = 0.2;
export const W_SLIDER_MAX = 1.0;
