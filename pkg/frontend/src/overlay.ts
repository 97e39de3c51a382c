// Crop geometry to screen rectangle mapping.
//
// Crop boxes use (row, column) coordinates: x is vertical (1..H) and y
// is horizontal (1..W), both 1-based, with spans x2-x1 and y2-y1. The
// displayed image is the same picture scaled to viewW x viewH, so the
// overlay is a pure affine map of the box through the display scale.

export interface CropGeometry {
  x1: number;
  y1: number;
  x2: number;
  y2: number;
}

export interface ScreenRect {
  left: number;
  top: number;
  width: number;
  height: number;
}

export function overlayRect(
  crop: CropGeometry,
  imageH: number,
  imageW: number,
  viewW: number,
  viewH: number,
): ScreenRect {
  const scaleX = viewW / imageW; // horizontal: y axis of the crop
  const scaleY = viewH / imageH; // vertical: x axis of the crop
  return {
    left: (crop.y1 - 1) * scaleX,
    top: (crop.x1 - 1) * scaleY,
    width: (crop.y2 - crop.y1) * scaleX,
    height: (crop.x2 - crop.x1) * scaleY,
  };
}

// Inverse of overlayRect, used to verify zoom round-trips.
export function cropFromRect(
  rect: ScreenRect,
  imageH: number,
  imageW: number,
  viewW: number,
  viewH: number,
): CropGeometry {
  const scaleX = viewW / imageW;
  const scaleY = viewH / imageH;
  return {
    x1: rect.top / scaleY + 1,
    y1: rect.left / scaleX + 1,
    x2: (rect.top + rect.height) / scaleY + 1,
    y2: (rect.left + rect.width) / scaleX + 1,
  };
}
