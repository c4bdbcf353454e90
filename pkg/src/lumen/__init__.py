"""Image enhancement for visual-odometry front-ends."""
