"""Toy video-to-audio generation with shortcut flow matching."""
